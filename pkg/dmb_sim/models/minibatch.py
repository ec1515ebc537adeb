"""
串行执行引擎与后悔值记账

- run_serial: 每个输入后都更新的串行模板
- run_minibatch: 串行小批量，批内预测不变，批末用平均梯度更新一次
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from loguru import logger

from .core import InputStream, Problem, Rng, Vector
from .errors import InputError
from .update_rules import Schedule, UpdateRule, UpdateState


def checkpoints(horizon: int) -> List[int]:
    """{1,2,5}×10^p 中不超过 horizon 的值，再加上 horizon 本身"""
    points = []
    scale = 1
    while scale <= horizon:
        for multiple in (1, 2, 5):
            if multiple * scale <= horizon:
                points.append(multiple * scale)
        scale *= 10
    if not points or points[-1] != horizon:
        points.append(horizon)
    return sorted(set(points))


def ordered_sum(rows: np.ndarray) -> Vector:
    """
    按列精确求和（math.fsum），结果与分块方式无关

    Args:
        rows: (c, n) 梯度矩阵，按到达顺序排列

    Returns:
        Vector: 长度 n 的和
    """
    if rows.shape[0] == 1:
        return np.array(rows[0], dtype=np.float64)
    return np.array([math.fsum(column) for column in rows.T])


@dataclass
class Checkpoint:
    """平均损失曲线上的一个点"""
    t: int
    avg_loss: float
    regret: Optional[float]


class RegretLedger:
    """
    后悔值账本

    流式累计 Σf(w_i,z_i) 与 Σ[f(w_i,z_i) − f(w*,z_i)]，并在对数间隔的检查点
    记录平均损失与累计后悔值。w* 未知时后悔值为 None。
    """

    def __init__(self, horizon: int, dimension: int, keep_terms: bool = False):
        self.horizon = horizon
        self.checkpoint_times = checkpoints(horizon)
        self.checkpoints: List[Checkpoint] = []
        self.count = 0
        self.total_loss = 0.0
        self.total_regret: Optional[float] = 0.0
        self.keep_terms = keep_terms
        self.loss_terms: List[np.ndarray] = []
        self.regret_terms: List[np.ndarray] = []
        self._prediction_sum = np.zeros(dimension)
        self._next_checkpoint = 0

    def record(self, losses: np.ndarray, comparator_losses: Optional[np.ndarray], predictor: np.ndarray) -> None:
        """
        记录一段按到达顺序排列的损失

        Args:
            losses: 本段每个输入的 f(w_i, z_i)
            comparator_losses: 对应的 f(w*, z_i)，未知时为 None
            predictor: 本段共用的预测向量 (n,)，或逐输入的预测矩阵 (c, n)
        """
        size = losses.shape[0]
        if size == 0:
            return
        if comparator_losses is None:
            self.total_regret = None
            differences = None
        else:
            differences = losses - comparator_losses

        end = self.count + size
        while (self._next_checkpoint < len(self.checkpoint_times)
               and self.checkpoint_times[self._next_checkpoint] <= end):
            t = self.checkpoint_times[self._next_checkpoint]
            prefix = t - self.count
            loss_so_far = self.total_loss + float(np.sum(losses[:prefix]))
            regret_so_far = None
            if differences is not None and self.total_regret is not None:
                regret_so_far = self.total_regret + float(np.sum(differences[:prefix]))
            self.checkpoints.append(Checkpoint(t, loss_so_far / t, regret_so_far))
            self._next_checkpoint += 1

        self.total_loss += float(np.sum(losses))
        if differences is not None and self.total_regret is not None:
            self.total_regret += float(np.sum(differences))
        if predictor.ndim == 1:
            self._prediction_sum += size * predictor
        else:
            self._prediction_sum += predictor.sum(axis=0)
        if self.keep_terms:
            self.loss_terms.append(np.array(losses))
            if differences is not None:
                self.regret_terms.append(np.array(differences))
        self.count = end

    @property
    def regret(self) -> Optional[float]:
        return self.total_regret

    @property
    def average_loss(self) -> float:
        return self.total_loss / self.count if self.count else 0.0

    @property
    def prediction_mean(self) -> Vector:
        """所有已做出预测的平均 (1/m)Σw_i"""
        return self._prediction_sum / max(self.count, 1)

    def per_input_regret(self) -> np.ndarray:
        return np.concatenate(self.regret_terms) if self.regret_terms else np.empty(0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "count": self.count,
            "average_loss": self.average_loss,
            "regret": self.total_regret,
            "checkpoints": [[c.t, c.avg_loss, c.regret] for c in self.checkpoints],
        }


@dataclass
class RunResult:
    """
    一次在线运行的结果

    属性：
    - ledger: 后悔值账本
    - state: 最终更新状态
    - trajectory: 每次更新后的预测向量，首项为 w₁
    - trace: 引擎相关的附加记录
    """
    ledger: RegretLedger
    state: UpdateState
    trajectory: List[Vector]
    trace: Dict[str, Any] = field(default_factory=dict)

    @property
    def predictor(self) -> Vector:
        return self.state.point

    @property
    def updates(self) -> int:
        return self.state.step


class MiniBatchLearner:
    """
    单个串行小批量学习者

    累计当前批的梯度，批满时以 ḡ = (1/b)Σg 调用一次更新规则。
    """

    def __init__(self, rule: UpdateRule, schedule: Schedule, dimension: int, batch_size: int):
        self.rule = rule
        self.schedule = schedule
        self.batch_size = batch_size
        self.state = rule.initial_state(dimension)
        self.trajectory: List[Vector] = [self.state.point]
        self._pending: List[np.ndarray] = []
        self._pending_count = 0

    @property
    def predictor(self) -> Vector:
        return self.state.point

    @property
    def batch_remaining(self) -> int:
        """当前批还能接收的输入数"""
        return self.batch_size - self._pending_count

    def observe(self, problem: Problem, inputs: np.ndarray) -> np.ndarray:
        """在当前预测向量上计算损失与梯度，批满则更新"""
        w = self.state.point
        losses = problem.losses(w, inputs)
        self._pending.append(problem.gradients(w, inputs))
        self._pending_count += inputs.shape[0]
        if self._pending_count == self.batch_size:
            self._update()
        return losses

    def _update(self) -> None:
        rows = self._pending[0] if len(self._pending) == 1 else np.concatenate(self._pending)
        g_bar = ordered_sum(rows) / self.batch_size
        alpha = self.schedule.alpha(self.state.step + 1)
        _, self.state = self.rule.apply(self.state, g_bar, alpha)
        self.trajectory.append(self.state.point)
        self._pending = []
        self._pending_count = 0


def run_minibatch(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, b: int,
                  rng: Rng, keep_terms: bool = False) -> RunResult:
    """
    串行小批量算法

    每 b 个输入共用一个预测向量；末尾不足 b 的部分批次只预测、计入账本，不更新。

    Args:
        rule: 更新规则
        schedule: 绑定了批大小的步长参数
        problem: 问题
        m: 输入总数
        b: 批大小，允许大于 m
        rng: 随机数流，输入取自其 "inputs" 子流
        keep_terms: 是否保留逐输入损失

    Returns:
        RunResult: 账本、最终状态与轨迹
    """
    if m < 1:
        raise InputError(f"输入数 m 必须 ≥ 1: {m}")
    if b < 1:
        raise InputError(f"批大小 b 必须 ≥ 1: {b}")

    stream = InputStream(problem.sampler, rng.child("inputs"))
    learner = MiniBatchLearner(rule, schedule, problem.dimension, b)
    ledger = RegretLedger(m, problem.dimension, keep_terms)

    while stream.consumed < m:
        inputs = stream.take(min(learner.batch_remaining, m - stream.consumed))
        w = learner.predictor
        losses = learner.observe(problem, inputs)
        ledger.record(losses, problem.comparator_losses(inputs), w)

    logger.debug(f"小批量运行完成: m={m}, b={b}, 更新 {learner.state.step} 次")
    return RunResult(ledger, learner.state, learner.trajectory)


def run_serial(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, rng: Rng,
               keep_terms: bool = False) -> RunResult:
    """串行模板：每个输入后更新一次（b = 1 的小批量）"""
    return run_minibatch(rule, schedule, problem, m, 1, rng, keep_terms=keep_terms)


def _draw_rows(problem: Problem, gen: np.random.Generator, count: int, offset: int) -> np.ndarray:
    return problem.sampler.draw(gen, count, offset=offset)


def empirical_avg_grad_variance(problem: Problem, w, b: int, samples: int, rng: Rng,
                                chunk_rows: int = 65536) -> float:
    """
    经验估计 E‖∇f̄(w, z̄) − ∇F(w)‖²

    ∇F 优先使用闭式；没有闭式时用独立子流上的大样本均值代替。

    Args:
        problem: 问题
        w: 评估点
        b: 小批量大小
        samples: 小批量个数
        rng: 随机数流
        chunk_rows: 每次抽取的最大行数

    Returns:
        float: 方差估计
    """
    if samples < 1 or b < 1:
        raise InputError(f"samples 与 b 必须 ≥ 1: samples={samples}, b={b}")
    w = np.asarray(w, dtype=np.float64)
    n = problem.dimension

    if problem.expected_grad is not None:
        mean_grad = problem.expected_grad(w)
    else:
        surrogate_gen = rng.child("surrogate").generator()
        total_rows = max(100_000, samples * b)
        running = np.zeros(n)
        drawn = 0
        while drawn < total_rows:
            count = min(chunk_rows, total_rows - drawn)
            rows = _draw_rows(problem, surrogate_gen, count, drawn)
            running += problem.gradients(w, rows).sum(axis=0)
            drawn += count
        mean_grad = running / total_rows

    gen = rng.child("batches").generator()
    batches_per_chunk = max(1, chunk_rows // b)
    total = 0.0
    done = 0
    while done < samples:
        batches = min(batches_per_chunk, samples - done)
        rows = _draw_rows(problem, gen, batches * b, done * b)
        averaged = problem.gradients(w, rows).reshape(batches, b, n).mean(axis=1)
        total += float(np.sum((averaged - mean_grad) ** 2))
        done += batches
    return total / samples

