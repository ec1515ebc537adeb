from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from ..models.analysis import (doubling_schedule, gap_bound, psi_dmb, psi_interlaced, psi_minibatch, psi_nocomm,
                               psi_serial)
from ..models.core import InputStream, Problem, Rng
from ..models.dmb import run_dmb, run_dmb_doubling, run_interlaced, run_no_comm
from ..models.minibatch import run_minibatch, run_serial
from ..models.network import SpanningTree, Topology, build_tree, compute_mu
from ..models.stochastic_opt import gap_vs_regret_check, run_dmb_opt, summarize_gap_vs_regret
from ..utils.config import ExperimentConfig
from ..utils.report_builder import CurveRow, rows_from_ledger
from .base_handler import BaseCommandHandler, ExperimentOutcome

EVALUATION_SAMPLES = 20000


class ExperimentHandler(BaseCommandHandler):
    """
    在线预测与随机优化实验命令

    每次试验的输入只由 (种子, 试验编号) 决定，同一试验中的不同变体
    看到完全相同的输入序列。
    """

    def get_command_handlers(self) -> Dict[str, Callable]:
        return {
            "serial": self.handle_serial,
            "minibatch": self.handle_minibatch,
            "dmb": self.handle_dmb,
            "nocomm": self.handle_nocomm,
            "interlaced": self.handle_interlaced,
            "opt": self.handle_opt,
            "compare": self.handle_compare,
            "sweep-batch": self.handle_sweep_batch,
            "sweep-latency": self.handle_sweep_latency,
        }

    async def run(self, config: ExperimentConfig) -> ExperimentOutcome:
        handler = self.get_command_handlers()[config.command]
        logger.info(f"🚀 开始实验 {config.command}: m={config.m}, 试验 {config.trials} 次, 种子 {config.seed}")
        outcome = await handler(config)
        logger.info(f"✅ 实验 {config.command} 完成: {len(outcome.rows)} 行")
        return outcome

    # ==================== 网络 ====================

    def resolve_network(self, config: ExperimentConfig,
                        latency: Optional[float] = None) -> Tuple[Topology, SpanningTree, int, dict]:
        """
        构造拓扑与生成树并确定 μ

        Returns:
            Tuple: (拓扑, 生成树, μ, 记录信息)
        """
        topology = self.build_topology(config, latency)
        tree = build_tree(topology, config.net.root)
        estimate = compute_mu(tree, topology.latency, topology.rate)
        if config.net.mu is not None:
            mu = config.net.mu
        else:
            mu = estimate.aligned if config.net.align_mu else estimate.mu
        notes = {"k": topology.node_count, "topology": topology.name, "tree_depth": tree.depth,
                 "latency": topology.latency, "mu": mu, "mu_raw": estimate.raw}
        return topology, tree, mu, notes

    # ==================== 命令 ====================

    async def handle_serial(self, config: ExperimentConfig) -> ExperimentOutcome:
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        schedule = self.build_schedule(config, problem, 1)
        # 试验编号 → (G(w̄_m), R(m)/m)
        conversions: Dict[int, Tuple[float, float]] = {}

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_serial(rule, schedule, problem, config.m, rng)
            if problem.has_closed_form:
                conversions[index] = gap_vs_regret_check(result.ledger, problem)
            return rows_from_ledger("serial", index, result.ledger)

        rows = await self.run_trials(config, trial)
        notes = {"problem": problem.to_dict(), "schedule": schedule.to_dict()}
        if conversions:
            summary = summarize_gap_vs_regret([conversions[index] for index in sorted(conversions)])
            notes["gap_vs_regret"] = {**asdict(summary), "holds": summary.holds}
            if not summary.holds:
                logger.warning(f"⚠️ 平均预测向量的间隙 {summary.mean_gap:.4g} 超过平均后悔值 "
                               f"{summary.mean_regret_rate:.4g} ± 2×{summary.regret_rate_stderr:.2g}")
        return ExperimentOutcome(rows, {"psi_serial": psi_serial(self.bound_params(config, problem))}, notes)

    async def handle_minibatch(self, config: ExperimentConfig) -> ExperimentOutcome:
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        schedules = {b: self.build_schedule(config, problem, b) for b in config.batch_sizes()}

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            rows = []
            for b, schedule in schedules.items():
                result = run_minibatch(rule, schedule, problem, config.m, b, rng)
                rows.extend(rows_from_ledger(f"minibatch-b{b}", index, result.ledger))
            return rows

        rows = await self.run_trials(config, trial)
        bounds = {f"psi_minibatch-b{b}": asdict(psi_minibatch(self.bound_params(config, problem, b)))
                  for b in schedules}
        return ExperimentOutcome(rows, bounds, {"problem": problem.to_dict()})

    async def handle_dmb(self, config: ExperimentConfig) -> ExperimentOutcome:
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        topology, tree, mu, notes = self.resolve_network(config)
        if config.batch_mode == "doubling":
            return await self._run_dmb_doubling(config, problem, rule, topology, tree, mu, notes)
        b = config.b
        schedule = self.build_schedule(config, problem, b)

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_dmb(rule, schedule, problem, config.m, topology, b, rng, mu=mu,
                             root=config.net.root, root_broadcast=config.net.root_broadcast, tree=tree)
            if not result.trace["dmb"].synchronized:
                logger.warning(f"⚠️ 试验 {index}: 节点预测向量出现不一致")
            return rows_from_ledger("dmb", index, result.ledger)

        rows = await self.run_trials(config, trial)
        bound = psi_dmb(self.bound_params(config, problem, b, mu, topology.node_count))
        notes["problem"] = problem.to_dict()
        return ExperimentOutcome(rows, {"psi_dmb": asdict(bound)}, notes)

    async def _run_dmb_doubling(self, config: ExperimentConfig, problem: Problem, rule, topology: Topology,
                                tree: SpanningTree, mu: int, notes: dict) -> ExperimentOutcome:
        """批大小按倍增周期取 b_e，每个周期重新开始"""
        rho = config.analysis.rho
        epochs = doubling_schedule(config.m, rho, nodes=topology.node_count)
        schedules = {b_e: self.build_schedule(config, problem, b_e) for _, _, _, b_e in epochs}

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_dmb_doubling(rule, schedules.__getitem__, problem, config.m, topology, rng, rho=rho,
                                      mu=mu, root=config.net.root, root_broadcast=config.net.root_broadcast,
                                      tree=tree)
            if not result.trace["dmb"].synchronized:
                logger.warning(f"⚠️ 试验 {index}: 节点预测向量出现不一致")
            return rows_from_ledger("dmb-doubling", index, result.ledger)

        rows = await self.run_trials(config, trial)
        final_b = epochs[-1][3]
        bound = psi_dmb(self.bound_params(config, problem, final_b, mu, topology.node_count))
        notes["doubling_schedule"] = [{"epoch": epoch, "start": start, "length": min(length, config.m - start),
                                       "b": b_e} for epoch, start, length, b_e in epochs]
        notes["problem"] = problem.to_dict()
        return ExperimentOutcome(rows, {"psi_dmb-final-epoch": asdict(bound)}, notes)

    async def handle_nocomm(self, config: ExperimentConfig) -> ExperimentOutcome:
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        k = config.net.k
        per_node_b = config.per_node_b
        schedule = self.build_schedule(config, problem, per_node_b)
        variant = "nocomm" if per_node_b == 1 else f"nocomm-b{per_node_b}"

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_no_comm(rule, schedule, problem, config.m, k, per_node_b, rng)
            return rows_from_ledger(variant, index, result.ledger)

        rows = await self.run_trials(config, trial)
        bounds = {"psi_nocomm": psi_nocomm(self.bound_params(config, problem, nodes=k))}
        return ExperimentOutcome(rows, bounds, {"k": k, "per_node_b": per_node_b, "problem": problem.to_dict()})

    async def handle_interlaced(self, config: ExperimentConfig) -> ExperimentOutcome:
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        topology, tree, mu, notes = self.resolve_network(config)
        b = config.b
        schedule = self.build_schedule(config, problem, b)

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_interlaced(rule, schedule, problem, config.m, topology, b, rng, mu=mu,
                                    root=config.net.root, root_broadcast=config.net.root_broadcast, tree=tree)
            return rows_from_ledger("interlaced", index, result.ledger)

        rows = await self.run_trials(config, trial)
        notes.update({"instances": 1 + mu // b, "problem": problem.to_dict()})
        bound = psi_interlaced(self.bound_params(config, problem, b, mu, topology.node_count))
        return ExperimentOutcome(rows, {"psi_interlaced": bound}, notes)

    async def handle_opt(self, config: ExperimentConfig) -> ExperimentOutcome:
        """
        每次试验一行：t 为消耗的样本数，avg_loss 为 F(w̄)，regret 列为最优性间隙

        F 没有闭式时 avg_loss 用独立样本估计，间隙留空。
        """
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        topology, tree, _, notes = self.resolve_network(config)
        b = config.b
        schedule = self.build_schedule(config, problem, b)

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            result = run_dmb_opt(rule, schedule, problem, config.m, topology, b, rng,
                                 root=config.net.root, tree=tree, keep_iterates=False)
            if problem.has_closed_form:
                value = problem.expected_loss(result.average)
            else:
                value = self._estimate_expected_loss(problem, result.average, rng.child("evaluation"))
            return [CurveRow("opt", index, result.samples_consumed, value, result.gap)]

        rows = await self.run_trials(config, trial)
        notes["problem"] = problem.to_dict()
        notes.pop("mu")
        bounds = {"gap_bound": gap_bound(self.bound_params(config, problem, b, 0, topology.node_count))}
        return ExperimentOutcome(rows, bounds, notes)

    async def handle_compare(self, config: ExperimentConfig) -> ExperimentOutcome:
        """串行、DMB、无通信及小批量无通信基线在同一输入序列上的比较"""
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        topology, tree, mu, notes = self.resolve_network(config)
        k = topology.node_count
        b = config.b
        per_node_b = config.per_node_b
        serial_schedule = self.build_schedule(config, problem, 1)
        dmb_schedule = self.build_schedule(config, problem, b)
        nocomm_schedule = self.build_schedule(config, problem, per_node_b)

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            rows = rows_from_ledger("serial", index, run_serial(rule, serial_schedule, problem, config.m, rng).ledger)
            dmb = run_dmb(rule, dmb_schedule, problem, config.m, topology, b, rng, mu=mu,
                          root=config.net.root, root_broadcast=config.net.root_broadcast, tree=tree)
            rows.extend(rows_from_ledger("dmb", index, dmb.ledger))
            plain = run_no_comm(rule, serial_schedule, problem, config.m, k, 1, rng)
            rows.extend(rows_from_ledger("nocomm", index, plain.ledger))
            if per_node_b > 1:
                batched = run_no_comm(rule, nocomm_schedule, problem, config.m, k, per_node_b, rng)
                rows.extend(rows_from_ledger(f"nocomm-b{per_node_b}", index, batched.ledger))
            return rows

        rows = await self.run_trials(config, trial)
        bounds = {
            "psi_serial": psi_serial(self.bound_params(config, problem)),
            "psi_dmb": asdict(psi_dmb(self.bound_params(config, problem, b, mu, k))),
            "psi_nocomm": psi_nocomm(self.bound_params(config, problem, nodes=k)),
        }
        notes["problem"] = problem.to_dict()
        return ExperimentOutcome(rows, bounds, notes)

    async def handle_sweep_batch(self, config: ExperimentConfig) -> ExperimentOutcome:
        """固定拓扑上扫描批大小；k = 1 时即串行小批量"""
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        topology, tree, mu, notes = self.resolve_network(config)
        schedules = {b: self.build_schedule(config, problem, b) for b in config.batch_sizes()}

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            rows = []
            for b, schedule in schedules.items():
                result = run_dmb(rule, schedule, problem, config.m, topology, b, rng, mu=mu,
                                 root=config.net.root, root_broadcast=config.net.root_broadcast, tree=tree)
                rows.extend(rows_from_ledger(f"b{b}", index, result.ledger))
            return rows

        rows = await self.run_trials(config, trial)
        bounds = {f"psi_dmb-b{b}": asdict(psi_dmb(self.bound_params(config, problem, b, mu, topology.node_count)))
                  for b in schedules}
        notes["problem"] = problem.to_dict()
        return ExperimentOutcome(rows, bounds, notes)

    async def handle_sweep_latency(self, config: ExperimentConfig) -> ExperimentOutcome:
        """
        固定 b 扫描延迟

        mu_list 非空时直接使用给定的 μ，否则按 latency_list 中的每个单跳延迟计算 μ。
        """
        problem = self.build_problem(config)
        rule = self.build_rule(config, problem)
        b = config.b
        schedule = self.build_schedule(config, problem, b)
        topology, tree, _, notes = self.resolve_network(config)

        settings: List[Tuple[str, Topology, SpanningTree, int]] = []
        if config.mu_list:
            settings = [(f"mu{mu}", topology, tree, mu) for mu in config.mu_list]
        else:
            for latency in config.latency_list or [config.net.latency]:
                swept, swept_tree, mu, _ = self.resolve_network(config, latency)
                settings.append((f"latency{latency:g}", swept, swept_tree, mu))

        def trial(index: int, rng: Rng) -> List[CurveRow]:
            rows = []
            for variant, swept, swept_tree, mu in settings:
                result = run_dmb(rule, schedule, problem, config.m, swept, b, rng, mu=mu,
                                 root=config.net.root, root_broadcast=config.net.root_broadcast, tree=swept_tree)
                rows.extend(rows_from_ledger(variant, index, result.ledger))
            return rows

        rows = await self.run_trials(config, trial)
        k = topology.node_count
        bounds = {f"psi_dmb-{variant}": asdict(psi_dmb(self.bound_params(config, problem, b, mu, k)))
                  for variant, _, _, mu in settings}
        notes.pop("mu")
        notes["mu_by_variant"] = {variant: mu for variant, _, _, mu in settings}
        notes["problem"] = problem.to_dict()
        return ExperimentOutcome(rows, bounds, notes)

    # ==================== 辅助 ====================

    def _estimate_expected_loss(self, problem: Problem, w, rng: Rng) -> float:
        stream = InputStream(problem.sampler, rng)
        return float(np.mean(problem.losses(w, stream.take(EVALUATION_SAMPLES))))
