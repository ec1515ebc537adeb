import asyncio
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from loguru import logger

from ..models.analysis import BoundParams
from ..models.core import FeasibleSet, Problem, Rng, logistic_stream, quadratic_problem
from ..models.network import Topology, build_topology
from ..models.update_rules import RuleKind, Schedule, UpdateRule, build_rule
from ..utils.config import ExperimentConfig
from ..utils.report_builder import CurveRow


@dataclass
class ExperimentOutcome:
    """
    一次实验的全部输出

    属性：
    - rows: 所有试验、所有变体的曲线行
    - bounds: 由分析模块给出的理论界
    - notes: 附加信息（μ、树深度等）
    """
    rows: List[CurveRow] = field(default_factory=list)
    bounds: Dict[str, Any] = field(default_factory=dict)
    notes: Dict[str, Any] = field(default_factory=dict)


class BaseCommandHandler(ABC):
    """
    命令处理器基类

    提供问题、规则、步长与拓扑的构造，以及试验的并发执行；
    所有具体的命令处理器都应继承此类。
    """

    def __init__(self, app):
        """
        Args:
            app: 主程序实例，用于访问运行数据库、报告构建器与输出目录
        """
        self.app = app
        self.report_builder = app.report_builder

    @abstractmethod
    def get_command_handlers(self) -> Dict[str, Callable]:
        """
        获取此处理器负责的命令映射

        Returns:
            Dict[str, callable]: 命令名到处理方法的映射
        """
        pass

    # ==================== 构造 ====================

    def build_problem(self, config: ExperimentConfig) -> Problem:
        """问题的随机部分（w° 与 σ² 估计）只依赖种子，与试验无关"""
        spec = config.problem
        if spec.kind == "quadratic":
            return quadratic_problem(spec.n, spec.sigma_z, diameter=spec.diameter)
        return logistic_stream(Rng(config.seed).child("problem"), spec.n, spec.sparsity,
                               spec.density, spec.label_noise, diameter=spec.diameter)

    def smoothness(self, config: ExperimentConfig, problem: Problem) -> float:
        return config.rule.smoothness if config.rule.smoothness is not None else problem.smoothness

    def build_rule(self, config: ExperimentConfig, problem: Problem) -> UpdateRule:
        feasible_set = None
        if config.rule.feasible_set == "ball":
            feasible_set = FeasibleSet.ball(config.rule.radius)
        return build_rule(RuleKind(config.rule.kind), feasible_set,
                          smoothness=self.smoothness(config, problem), lam=config.rule.lam)

    def build_schedule(self, config: ExperimentConfig, problem: Problem, b: int) -> Schedule:
        """
        绑定批大小的步长参数

        rule.gamma 给定时 γ = gamma/√b，否则取 σ/(√b·D)。
        """
        L = self.smoothness(config, problem)
        if config.rule.schedule == "constant":
            if problem.minimizer is not None and problem.minimizer.any():
                h_star = 0.5 * float(problem.minimizer @ problem.minimizer)
            else:
                h_star = 0.5 * problem.diameter ** 2
            return Schedule.constant_for(L, problem.sigma, h_star, config.m, b)
        if config.rule.gamma is not None:
            return Schedule.sqrt(L, config.rule.gamma / math.sqrt(b))
        return Schedule.sqrt_for(L, problem.sigma, problem.diameter, b)

    def build_topology(self, config: ExperimentConfig, latency: Optional[float] = None) -> Topology:
        net = config.net
        return build_topology(net.topology, net.k, net.latency if latency is None else latency,
                              net.rate, net.arity, Path(net.path) if net.path else None)

    def bound_params(self, config: ExperimentConfig, problem: Problem, b: int = 1,
                     mu: float = 0.0, nodes: int = 1) -> BoundParams:
        return BoundParams(sigma2=problem.grad_variance, horizon=config.m, diameter=problem.diameter,
                           smoothness=self.smoothness(config, problem), batch_size=b,
                           latency_gap=mu, nodes=nodes)

    # ==================== 执行 ====================

    async def run_trials(self, config: ExperimentConfig,
                         trial_fn: Callable[[int, Rng], List[CurveRow]]) -> List[CurveRow]:
        """
        并发执行所有试验

        第 t 次试验使用 Rng(seed).child("trial", t)；最多同时运行 workers 个。

        Args:
            config: 实验配置
            trial_fn: (试验编号, 随机数流) → 该试验的曲线行

        Returns:
            List[CurveRow]: 所有试验的行（未排序）
        """
        semaphore = asyncio.Semaphore(config.workers)
        root = Rng(config.seed)

        async def _run(trial: int) -> List[CurveRow]:
            async with semaphore:
                rows = await asyncio.to_thread(trial_fn, trial, root.child("trial", trial))
                logger.debug(f"试验 {trial} 完成: {len(rows)} 行")
                return rows

        results = await asyncio.gather(*(_run(trial) for trial in range(config.trials)))
        return [row for rows in results for row in rows]
