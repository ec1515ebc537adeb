"""
分布式小批量（DMB）引擎

- run_dmb: k 个节点共同累计 b 个梯度，经树上向量求和后同步更新；
  求和期间到达的 μ 个输入照常预测、计入后悔值，但不计算梯度
- run_dmb_doubling: 按倍增周期增大批大小、每个周期重新开始的 DMB
- run_no_comm: k 个互不通信的串行学习者
- run_interlaced: c = 1 + μ/b 个交错实例，预测取各实例预测向量的平均

时钟以输入计数为单位（逻辑时间），输入按到达序号轮流分配给各节点。
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .analysis import doubling_schedule
from .core import InputStream, Problem, Rng, Vector
from .errors import ConfigError, InputError
from .minibatch import MiniBatchLearner, RegretLedger, RunResult, ordered_sum
from .network import SpanningTree, Topology, align_to_nodes, build_tree, compute_mu, vector_sum
from .update_rules import Schedule, UpdateRule


@dataclass(frozen=True)
class BatchSchedule:
    """
    DMB 批次参数

    属性：
    - batch_size: 每个周期贡献梯度的输入数 b（k 的倍数）
    - latency_gap: 每个周期只预测不求梯度的输入数 μ
    - node_count: 节点数 k
    """
    batch_size: int
    latency_gap: int
    node_count: int

    def __post_init__(self):
        if self.node_count < 1:
            raise ConfigError(f"节点数必须 ≥ 1: {self.node_count}")
        if self.batch_size < self.node_count or self.batch_size % self.node_count != 0:
            raise ConfigError(f"批大小 b={self.batch_size} 必须是节点数 k={self.node_count} 的正整数倍")
        if self.latency_gap < 0:
            raise ConfigError(f"μ 不能为负: {self.latency_gap}")
        if self.latency_gap % self.node_count != 0:
            logger.debug(f"μ={self.latency_gap} 不是 k={self.node_count} 的倍数，"
                         f"各节点在求和期间收到的输入数不相等")

    @classmethod
    def aligned(cls, batch_size: int, latency_gap: int, node_count: int) -> "BatchSchedule":
        """μ 向上取整到 k 的倍数"""
        return cls(batch_size, align_to_nodes(latency_gap, node_count), node_count)

    @property
    def cycle_length(self) -> int:
        return self.batch_size + self.latency_gap

    @property
    def per_node_batch(self) -> int:
        return self.batch_size // self.node_count


@dataclass
class CycleRecord:
    """一个 DMB 周期的记录"""
    index: int
    start: int
    gradient_inputs: int
    discarded_inputs: int
    messages: int
    synchronized: bool


@dataclass
class DMBTrace:
    """
    节点级运行记录

    属性：
    - cycles: 每个完成周期的记录
    - node_inputs: 每个节点收到的输入数
    - node_gradients: 每个节点计算的梯度数
    - tree_depth: 生成树深度
    - latency_gap: 使用的 μ
    """
    cycles: List[CycleRecord] = field(default_factory=list)
    node_inputs: Optional[np.ndarray] = None
    node_gradients: Optional[np.ndarray] = None
    tree_depth: int = 0
    latency_gap: int = 0

    @property
    def synchronized(self) -> bool:
        return all(cycle.synchronized for cycle in self.cycles)


class NodeGroup:
    """
    k 个节点各自持有的更新状态

    默认每个节点用自己收到的求和结果独立更新；root_broadcast 时只有根更新，
    再把新状态沿树下发。
    """

    def __init__(self, rule: UpdateRule, schedule: Schedule, dimension: int,
                 tree: SpanningTree, root_broadcast: bool = False):
        self.rule = rule
        self.schedule = schedule
        self.tree = tree
        self.root_broadcast = root_broadcast
        initial = rule.initial_state(dimension)
        self.states = [initial] * tree.node_count

    @property
    def predictor(self) -> Vector:
        return self.states[self.tree.root].point

    @property
    def step(self) -> int:
        return self.states[self.tree.root].step

    def apply(self, averaged: List[Vector]) -> bool:
        """
        用各节点持有的 ḡ 更新

        Returns:
            bool: 更新后所有节点的预测向量是否逐位相同
        """
        alpha = self.schedule.alpha(self.step + 1)
        if self.root_broadcast:
            root = self.tree.root
            _, new_state = self.rule.apply(self.states[root], averaged[root], alpha)
            self.states = [new_state] * self.tree.node_count
            return True
        self.states = [self.rule.apply(state, g_bar, alpha)[1]
                       for state, g_bar in zip(self.states, averaged)]
        reference = self.predictor
        return all(np.array_equal(state.point, reference) for state in self.states)


def node_partial_sums(gradients: np.ndarray, start: int, node_count: int) -> List[Vector]:
    """按到达序号轮流分配后，各节点对自己那部分梯度求和"""
    return [ordered_sum(gradients[(node - start) % node_count::node_count]) for node in range(node_count)]


def _count_arrivals(counter: np.ndarray, start: int, count: int) -> None:
    nodes = (start + np.arange(count)) % counter.shape[0]
    counter += np.bincount(nodes, minlength=counter.shape[0])


def _resolve_network(topology: Topology, b: int, mu: Optional[int], root: int,
                     tree: Optional[SpanningTree]) -> Tuple[SpanningTree, BatchSchedule]:
    tree = tree or build_tree(topology, root)
    if mu is None:
        mu = compute_mu(tree, topology.latency, topology.rate).mu
    return tree, BatchSchedule(b, int(mu), topology.node_count)


def run_dmb(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, topology: Topology,
            b: int, rng: Rng, mu: Optional[int] = None, root: int = 0, root_broadcast: bool = False,
            tree: Optional[SpanningTree] = None, keep_terms: bool = False) -> RunResult:
    """
    分布式小批量在线预测

    每个周期：b 个输入（每节点 b/k 个）在 w_j 上预测并求梯度，随后 μ 个输入
    只预测；向量求和完成后各节点以 ḡ_j = Σg/b 做相同的更新。末尾不完整的
    周期只预测不更新。

    Args:
        rule: 更新规则
        schedule: 绑定了批大小的步长参数
        problem: 问题
        m: 输入总数
        topology: 网络拓扑
        b: 批大小
        rng: 随机数流
        mu: 覆盖由拓扑计算的 μ
        root: 生成树根节点
        root_broadcast: 是否由根更新后广播
        tree: 预先构建的生成树
        keep_terms: 是否保留逐输入损失

    Returns:
        RunResult: trace["dmb"] 为 DMBTrace

    Raises:
        ConfigError: b 不是 k 的倍数或 μ 为负
    """
    if m < 1:
        raise InputError(f"输入数 m 必须 ≥ 1: {m}")
    tree, batch = _resolve_network(topology, b, mu, root, tree)
    k = topology.node_count

    stream = InputStream(problem.sampler, rng.child("inputs"))
    group = NodeGroup(rule, schedule, problem.dimension, tree, root_broadcast)
    ledger = RegretLedger(m, problem.dimension, keep_terms)
    trajectory = [group.predictor]
    trace = DMBTrace(node_inputs=np.zeros(k, dtype=np.int64), node_gradients=np.zeros(k, dtype=np.int64),
                     tree_depth=tree.depth, latency_gap=batch.latency_gap)

    _run_cycles(group, batch, problem, stream, m, ledger, trace, trajectory)

    logger.debug(f"DMB 运行完成: k={k}, b={b}, μ={batch.latency_gap}, 周期 {len(trace.cycles)}")
    return RunResult(ledger, group.states[tree.root], trajectory, trace={"dmb": trace})


def _run_cycles(group: NodeGroup, batch: BatchSchedule, problem: Problem, stream: InputStream, limit: int,
                ledger: RegretLedger, trace: DMBTrace, trajectory: List[Vector]) -> int:
    """
    从输入流当前位置跑 DMB 周期，直到消耗到第 limit 个输入

    Returns:
        int: 本段完成的更新次数
    """
    tree = group.tree
    k = batch.node_count
    updates = 0
    while stream.consumed < limit:
        start = stream.consumed
        w = group.predictor
        count = min(batch.batch_size, limit - start)
        inputs = stream.take(count)
        ledger.record(problem.losses(w, inputs), problem.comparator_losses(inputs), w)
        _count_arrivals(trace.node_inputs, start, count)
        if count < batch.batch_size:
            break

        summed = vector_sum(tree, node_partial_sums(problem.gradients(w, inputs), start, k))
        trace.node_gradients += batch.per_node_batch

        discarded = min(batch.latency_gap, limit - stream.consumed)
        if discarded:
            latency_start = stream.consumed
            latency_inputs = stream.take(discarded)
            ledger.record(problem.losses(w, latency_inputs), problem.comparator_losses(latency_inputs), w)
            _count_arrivals(trace.node_inputs, latency_start, discarded)
        if discarded < batch.latency_gap:
            break

        synchronized = group.apply([held / batch.batch_size for held in summed.held])
        trajectory.append(group.predictor)
        trace.cycles.append(CycleRecord(len(trace.cycles), start, batch.batch_size, discarded,
                                        len(summed.messages), synchronized))
        updates += 1
    return updates


@dataclass
class EpochRecord:
    """倍增模式下一个周期的记录"""
    epoch: int
    start: int
    length: int
    batch_size: int
    updates: int


def run_dmb_doubling(rule: UpdateRule, schedule_for: Callable[[int], Schedule], problem: Problem, m: int,
                     topology: Topology, rng: Rng, rho: float = 1.0 / 3.0, mu: Optional[int] = None,
                     root: int = 0, root_broadcast: bool = False, tree: Optional[SpanningTree] = None,
                     keep_terms: bool = False) -> RunResult:
    """
    倍增技巧下的 DMB

    第 e 个周期覆盖输入 [2^e − 1, 2^(e+1) − 1)，批大小 b_e = round((2^e)^ρ) 并向上取整到 k 的倍数。
    每个周期开始时所有节点重置为初始状态，步长按 b_e 重新绑定；输入流与账本贯穿整个运行。

    Args:
        schedule_for: 由批大小构造步长参数
        rho: 批大小增长指数

    Returns:
        RunResult: trace["dmb"] 为 DMBTrace，trace["epochs"] 为各周期的 EpochRecord；
        trajectory 只记录初始点与每次更新后的预测向量
    """
    if m < 1:
        raise InputError(f"输入数 m 必须 ≥ 1: {m}")
    k = topology.node_count
    tree = tree or build_tree(topology, root)
    if mu is None:
        mu = compute_mu(tree, topology.latency, topology.rate).mu
    mu = int(mu)

    stream = InputStream(problem.sampler, rng.child("inputs"))
    ledger = RegretLedger(m, problem.dimension, keep_terms)
    trace = DMBTrace(node_inputs=np.zeros(k, dtype=np.int64), node_gradients=np.zeros(k, dtype=np.int64),
                     tree_depth=tree.depth, latency_gap=mu)
    trajectory = [rule.initial_state(problem.dimension).point]
    epochs: List[EpochRecord] = []
    state = None

    for epoch, start, length, b_e in doubling_schedule(m, rho, nodes=k):
        end = min(start + length, m)
        group = NodeGroup(rule, schedule_for(b_e), problem.dimension, tree, root_broadcast)
        updates = _run_cycles(group, BatchSchedule(b_e, mu, k), problem, stream, end, ledger, trace, trajectory)
        epochs.append(EpochRecord(epoch, start, end - start, b_e, updates))
        state = group.states[tree.root]

    logger.debug(f"倍增 DMB 运行完成: k={k}, μ={mu}, {len(epochs)} 个周期, 更新 {len(trace.cycles)} 次")
    return RunResult(ledger, state, trajectory, trace={"dmb": trace, "epochs": epochs})


def run_no_comm(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, k: int,
                per_node_b: int, rng: Rng, keep_terms: bool = False) -> RunResult:
    """
    无通信基线

    k 个独立的串行（per_node_b > 1 时为串行小批量）学习者，输入按到达序号
    轮流分配，每个节点至多 ⌈m/k⌉ 个。总账本按到达顺序累计所有节点的损失。

    Returns:
        RunResult: state/trajectory 为节点 0 的；trace 中有各节点账本、状态与轨迹
    """
    if m < 1:
        raise InputError(f"输入数 m 必须 ≥ 1: {m}")
    if k < 1 or per_node_b < 1:
        raise ConfigError(f"节点数与每节点批大小必须 ≥ 1: k={k}, b={per_node_b}")

    n = problem.dimension
    stream = InputStream(problem.sampler, rng.child("inputs"))
    learners = [MiniBatchLearner(rule, schedule, n, per_node_b) for _ in range(k)]
    ledger = RegretLedger(m, n, keep_terms)
    node_ledgers = [RegretLedger(max(len(range(node, m, k)), 1), n) for node in range(k)]

    while stream.consumed < m:
        # 块起点总是 k 的倍数，节点 j 取块内第 j, j+k, ... 个输入
        count = min(k * learners[0].batch_remaining, m - stream.consumed)
        inputs = stream.take(count)
        losses = np.empty(count)
        predictors = np.empty((count, n))
        for node, learner in enumerate(learners):
            rows = inputs[node::k]
            if rows.shape[0] == 0:
                continue
            w = learner.predictor
            node_losses = learner.observe(problem, rows)
            node_ledgers[node].record(node_losses, problem.comparator_losses(rows), w)
            losses[node::k] = node_losses
            predictors[node::k] = w
        ledger.record(losses, problem.comparator_losses(inputs), predictors)

    logger.debug(f"无通信基线完成: k={k}, 每节点批大小 {per_node_b}")
    return RunResult(ledger, learners[0].state, learners[0].trajectory, trace={
        "node_ledgers": node_ledgers,
        "node_states": [learner.state for learner in learners],
        "node_trajectories": [learner.trajectory for learner in learners],
    })


def interlaced_instance_count(b: int, mu: int) -> int:
    """c = 1 + μ/b；b 不整除 μ 时报配置错误"""
    if b < 1 or mu < 0 or mu % b != 0:
        raise ConfigError(f"交错实例要求 b 整除 μ: b={b}, μ={mu}")
    return 1 + mu // b


def run_interlaced(rule: UpdateRule, schedule: Schedule, problem: Problem, m: int, topology: Topology,
                   b: int, rng: Rng, mu: Optional[int] = None, root: int = 0, root_broadcast: bool = False,
                   tree: Optional[SpanningTree] = None, track_jensen: bool = False,
                   keep_terms: bool = False) -> RunResult:
    """
    交错的 DMB 实例

    c 个实例轮流工作：实例 a 在第 a, a+c, ... 个长度为 b 的块上收集梯度并发起
    向量求和，求和恰好在它下一次工作前完成。每个输入都用 c 个实例当前预测向量
    的坐标平均来预测。

    Args:
        track_jensen: 记录平均预测的损失与各实例损失的均值

    Returns:
        RunResult: trajectory 为每次更新后的平均预测向量；
        track_jensen 时 trace["jensen"] 为 (平均预测损失, 实例损失均值)

    Raises:
        ConfigError: b 不整除 μ 或 b 不是 k 的倍数
    """
    if m < 1:
        raise InputError(f"输入数 m 必须 ≥ 1: {m}")
    tree, batch = _resolve_network(topology, b, mu, root, tree)
    k = topology.node_count
    instances = interlaced_instance_count(batch.batch_size, batch.latency_gap)

    stream = InputStream(problem.sampler, rng.child("inputs"))
    groups = [NodeGroup(rule, schedule, problem.dimension, tree, root_broadcast) for _ in range(instances)]
    pending: List[Optional[Tuple[List[Vector], int]]] = [None] * instances
    ledger = RegretLedger(m, problem.dimension, keep_terms)
    synchronized = True

    def averaged() -> Vector:
        if instances == 1:
            return groups[0].predictor
        return np.mean(np.stack([group.predictor for group in groups]), axis=0)

    trajectory = [averaged()]
    served_losses: List[np.ndarray] = []
    instance_losses: List[np.ndarray] = []
    block = 0

    while stream.consumed < m:
        active = block % instances
        if pending[active] is not None:
            synchronized &= groups[active].apply(pending[active][0])
            pending[active] = None
            trajectory.append(averaged())

        start = stream.consumed
        w_avg = averaged()
        count = min(batch.batch_size, m - start)
        inputs = stream.take(count)
        losses = problem.losses(w_avg, inputs)
        ledger.record(losses, problem.comparator_losses(inputs), w_avg)
        if track_jensen:
            served_losses.append(losses)
            instance_losses.append(np.mean([problem.losses(group.predictor, inputs) for group in groups], axis=0))

        if count == batch.batch_size:
            gradients = problem.gradients(groups[active].predictor, inputs)
            summed = vector_sum(tree, node_partial_sums(gradients, start, k))
            pending[active] = ([held / batch.batch_size for held in summed.held],
                               start + batch.cycle_length)
        block += 1

    # 在输入序列结束前已完成的求和
    finished = sorted((entry[1], index) for index, entry in enumerate(pending)
                      if entry is not None and entry[1] <= m)
    for _, index in finished:
        synchronized &= groups[index].apply(pending[index][0])
        trajectory.append(averaged())

    trace: Dict[str, Any] = {"instances": instances, "synchronized": synchronized,
                             "instance_predictors": [group.predictor for group in groups]}
    if track_jensen:
        trace["jensen"] = (np.concatenate(served_losses), np.concatenate(instance_losses))
    logger.debug(f"交错实例运行完成: c={instances}, b={b}, μ={batch.latency_gap}")
    return RunResult(ledger, groups[0].states[tree.root], trajectory, trace=trace)
