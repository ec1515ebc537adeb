"""
随机优化形式的 DMB 与最优性间隙

优化场景下没有预测任务，等待向量求和期间不必处理输入，
因此每个周期只消耗 b 个样本，共 r = ⌊m/b⌋ 个周期，输出迭代点的平均。
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .core import InputStream, Problem, Rng, Vector
from .dmb import BatchSchedule, node_partial_sums
from .errors import RunError, UnsupportedError
from .minibatch import RegretLedger
from .network import SpanningTree, Topology, build_tree, vector_sum
from .update_rules import Schedule, UpdateRule, UpdateState


@dataclass
class OptRun:
    """
    优化运行结果

    属性：
    - average: 迭代点平均 w̄ = (1/r)Σw_j
    - batches: 周期数 r
    - samples_consumed: 消耗的样本数 r·b
    - gap: F 有闭式时的最优性间隙
    - iterates: 参与平均的迭代点 w_1..w_r
    - state: 最终更新状态
    """
    average: Vector
    batches: int
    samples_consumed: int
    gap: Optional[float] = None
    iterates: List[Vector] = field(default_factory=list)
    state: Optional[UpdateState] = None


def run_dmb_opt(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, topology: Topology,
                b: int, rng: Rng, root: int = 0, tree: Optional[SpanningTree] = None,
                keep_iterates: bool = True) -> OptRun:
    """
    DMB 随机优化

    第 j 个周期在 w_j 上取 b 个样本（每节点 b/k 个）求梯度，向量求和后以
    α_j = schedule(j) 更新；多余的 m − r·b 个样本不使用。

    Raises:
        ConfigError: b 不是 k 的倍数
        RunError: b > m，没有完整周期
    """
    batch = BatchSchedule(b, 0, topology.node_count)
    batches = m // b
    if batches == 0:
        raise RunError(f"b={b} 大于 m={m}，没有完整的批次")
    tree = tree or build_tree(topology, root)
    k = topology.node_count

    stream = InputStream(problem.sampler, rng.child("inputs"))
    state = rule.initial_state(problem.dimension)
    average = np.zeros(problem.dimension)
    iterates: List[Vector] = []

    for j in range(1, batches + 1):
        w = state.point
        if keep_iterates:
            iterates.append(w)
        average = average + (w - average) / j
        inputs = stream.take(batch.batch_size)
        summed = vector_sum(tree, node_partial_sums(problem.gradients(w, inputs), (j - 1) * b, k))
        _, state = rule.apply(state, summed.total / batch.batch_size, schedule.alpha(j))

    gap = optimality_gap(problem, average) if problem.has_closed_form else None
    logger.debug(f"DMB 优化完成: r={batches}, b={b}, 间隙={gap}")
    return OptRun(average, batches, batches * b, gap, iterates, state)


def optimality_gap(problem: Problem, w) -> float:
    """
    G = F(w) − F(w*)

    Raises:
        UnsupportedError: 问题缺少 F 闭式或 w*
    """
    if not problem.has_closed_form:
        raise UnsupportedError("该问题没有 F 的闭式或 w*，请使用 monte_carlo_gap")
    w = np.asarray(w, dtype=np.float64)
    return problem.expected_loss(w) - problem.expected_loss(problem.minimizer)


def monte_carlo_gap(problem: Problem, w, reference, samples: int, rng: Rng,
                    chunk_rows: int = 65536) -> Tuple[float, float]:
    """
    间隙的蒙特卡洛替代：E[f(w,z) − f(reference,z)]

    Returns:
        Tuple[float, float]: (均值, 标准误)
    """
    w = np.asarray(w, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    gen = rng.generator()
    total = 0.0
    total_sq = 0.0
    drawn = 0
    while drawn < samples:
        count = min(chunk_rows, samples - drawn)
        rows = problem.sampler.draw(gen, count, offset=drawn)
        differences = problem.losses(w, rows) - problem.losses(reference, rows)
        total += float(np.sum(differences))
        total_sq += float(np.sum(differences ** 2))
        drawn += count
    mean = total / samples
    variance = max(total_sq / samples - mean ** 2, 0.0) * samples / max(samples - 1, 1)
    return mean, math.sqrt(variance / samples)


def gap_vs_regret_check(ledger: RegretLedger, problem: Problem) -> Tuple[float, float]:
    """
    在线预测的平均预测向量的间隙与平均后悔值

    Returns:
        Tuple[float, float]: (G(w̄_m), R(m)/m)

    Raises:
        UnsupportedError: 账本没有后悔值或问题没有闭式
    """
    if ledger.regret is None:
        raise UnsupportedError("账本没有后悔值（w* 未知）")
    return optimality_gap(problem, ledger.prediction_mean), ledger.regret / ledger.count


@dataclass
class GapRegretSummary:
    """多次试验的间隙与平均后悔值汇总"""
    mean_gap: float
    mean_regret_rate: float
    regret_rate_stderr: float
    trials: int

    @property
    def holds(self) -> bool:
        """均值 G ≤ 均值 R/m + 2 个标准误"""
        return self.mean_gap <= self.mean_regret_rate + 2.0 * self.regret_rate_stderr


def summarize_gap_vs_regret(pairs: Sequence[Tuple[float, float]]) -> GapRegretSummary:
    gaps = np.array([pair[0] for pair in pairs])
    rates = np.array([pair[1] for pair in pairs])
    stderr = float(np.std(rates, ddof=1) / math.sqrt(len(rates))) if len(rates) > 1 else 0.0
    return GapRegretSummary(float(gaps.mean()), float(rates.mean()), stderr, len(pairs))
