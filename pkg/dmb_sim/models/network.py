"""
网络拓扑与向量求和模拟

节点图、根节点最小深度生成树、树上的全局向量求和（上行归约 + 下行广播），
以及由链路延迟和输入速率换算出的 μ。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from loguru import logger

from .core import Rng, Vector
from .errors import InputError, TopologyError


@dataclass
class Topology:
    """
    网络拓扑

    属性：
    - node_count: 节点数 k
    - edges: 无向边列表
    - latency: 每跳单向延迟 ℓ（毫秒）
    - rate: 全系统输入到达速率 r（每毫秒输入数）
    - name: 拓扑名称
    """
    node_count: int
    edges: List[Tuple[int, int]] = field(default_factory=list)
    latency: float = 0.5
    rate: float = 4.0
    name: str = "custom"

    def __post_init__(self):
        if self.node_count < 1:
            raise TopologyError(f"节点数必须 ≥ 1: {self.node_count}")
        if self.latency < 0:
            raise TopologyError(f"链路延迟不能为负: {self.latency}")
        if not self.rate > 0:
            raise TopologyError(f"输入速率必须为正: {self.rate}")
        for u, v in self.edges:
            if not (0 <= u < self.node_count and 0 <= v < self.node_count) or u == v:
                raise TopologyError(f"非法边 ({u}, {v})，节点数 {self.node_count}")

    @property
    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.node_count))
        graph.add_edges_from(self.edges)
        return graph

    @property
    def is_connected(self) -> bool:
        return nx.is_connected(self.graph)

    # ---------- 常用拓扑 ----------

    @classmethod
    def star(cls, k: int, latency: float = 0.5, rate: float = 4.0) -> "Topology":
        """节点 0 为中心"""
        return cls(k, [(0, node) for node in range(1, k)], latency, rate, "star")

    @classmethod
    def path(cls, k: int, latency: float = 0.5, rate: float = 4.0) -> "Topology":
        return cls(k, [(node, node + 1) for node in range(k - 1)], latency, rate, "path")

    @classmethod
    def dary_tree(cls, k: int, arity: int = 2, latency: float = 0.5, rate: float = 4.0) -> "Topology":
        """堆式编号的完全 d 叉树，节点 i 的父节点为 (i−1)//d"""
        if arity < 1:
            raise TopologyError(f"树的分叉数必须 ≥ 1: {arity}")
        return cls(k, [((node - 1) // arity, node) for node in range(1, k)], latency, rate, f"tree{arity}")

    @classmethod
    def complete(cls, k: int, latency: float = 0.5, rate: float = 4.0) -> "Topology":
        return cls(k, [(u, v) for u in range(k) for v in range(u + 1, k)], latency, rate, "complete")

    @classmethod
    def random_connected(cls, k: int, extra_edges: int, rng: Rng,
                         latency: float = 0.5, rate: float = 4.0) -> "Topology":
        """随机生成树加若干随机边"""
        gen = rng.generator()
        edges = set()
        for node in range(1, k):
            edges.add((int(gen.integers(0, node)), node))
        attempts = 0
        while k > 2 and len(edges) < k - 1 + extra_edges and attempts < 10 * (extra_edges + 1):
            u, v = sorted(int(x) for x in gen.choice(k, size=2, replace=False))
            edges.add((u, v))
            attempts += 1
        return cls(k, sorted(edges), latency, rate, "random")


def build_topology(kind: str, k: int, latency: float = 0.5, rate: float = 4.0,
                   arity: int = 2, path: Optional[Path] = None) -> Topology:
    """
    按名称构造拓扑

    Args:
        kind: star / path / tree / complete / file
        k: 节点数（file 类型忽略）
        latency: 每跳延迟
        rate: 输入速率
        arity: 树的分叉数
        path: 拓扑文件路径

    Returns:
        Topology: 拓扑
    """
    if kind == "star":
        return Topology.star(k, latency, rate)
    if kind == "path":
        return Topology.path(k, latency, rate)
    if kind == "tree":
        return Topology.dary_tree(k, arity, latency, rate)
    if kind == "complete":
        return Topology.complete(k, latency, rate)
    if kind == "file":
        if path is None:
            raise TopologyError("file 类型拓扑需要提供文件路径")
        return read_topology(path, latency, rate)
    raise TopologyError(f"未知拓扑类型: {kind}")


def read_topology(path: Path, latency: float = 0.5, rate: float = 4.0) -> Topology:
    """
    读取拓扑文件

    格式：首行为节点数 k，其后每行一条边 "u v"；空行与 # 注释忽略。

    Raises:
        TopologyError: 格式错误
        OSError: 文件无法读取
    """
    lines = [line.split("#", 1)[0].strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise TopologyError(f"拓扑文件为空: {path}")
    try:
        k = int(lines[0])
        edges = []
        for line in lines[1:]:
            u, v = line.split()
            edges.append((int(u), int(v)))
    except ValueError as e:
        raise TopologyError(f"拓扑文件格式错误 {path}: {e}") from e
    return Topology(k, edges, latency, rate, Path(path).stem)


def write_topology(topology: Topology, path: Path) -> None:
    lines = [str(topology.node_count)] + [f"{u} {v}" for u, v in topology.edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ==================== 生成树 ====================

@dataclass
class SpanningTree:
    """
    根节点最小深度生成树

    属性：
    - root: 根节点
    - parent: 父节点映射，根为 None
    - children: 子节点列表（按编号升序）
    - distance: 到根的跳数
    - depth: 树深度
    """
    root: int
    parent: Dict[int, Optional[int]]
    children: Dict[int, List[int]]
    distance: Dict[int, int]
    depth: int

    @property
    def node_count(self) -> int:
        return len(self.parent)

    @property
    def upward_order(self) -> List[int]:
        """上行归约顺序：深度从大到小，同深度按编号"""
        return sorted(self.parent, key=lambda node: (-self.distance[node], node))

    @property
    def downward_order(self) -> List[int]:
        return sorted(self.parent, key=lambda node: (self.distance[node], node))


def build_tree(topology: Topology, root: int = 0) -> SpanningTree:
    """
    从根做 BFS 得到最小深度生成树

    同一深度有多个候选父节点时取编号最小者。

    Raises:
        TopologyError: 根不存在或图不连通
    """
    graph = topology.graph
    if root not in graph:
        raise TopologyError(f"根节点 {root} 不在拓扑中")
    if not nx.is_connected(graph):
        raise TopologyError(f"拓扑 {topology.name} 不连通")

    distance = nx.single_source_shortest_path_length(graph, root)
    parent: Dict[int, Optional[int]] = {root: None}
    children: Dict[int, List[int]] = {node: [] for node in graph.nodes}
    for node in sorted(graph.nodes):
        if node == root:
            continue
        candidates = [u for u in graph.neighbors(node) if distance[u] == distance[node] - 1]
        parent[node] = min(candidates)
        children[parent[node]].append(node)
    for node in children:
        children[node].sort()

    depth = max(distance.values())
    logger.debug(f"生成树构建完成: 拓扑={topology.name}, k={topology.node_count}, 根={root}, 深度={depth}")
    return SpanningTree(root, parent, children, dict(distance), depth)


@dataclass
class Message:
    """一条树上消息"""
    source: int
    target: int
    direction: str  # "up" 或 "down"


@dataclass
class VectorSumResult:
    """
    向量求和结果

    属性：
    - total: 规范归约顺序下的总和
    - held: 每个节点最终持有的向量
    - messages: 消息记录
    """
    total: Vector
    held: List[Vector]
    messages: List[Message]


def vector_sum(tree: SpanningTree, per_node: Sequence[Vector]) -> VectorSumResult:
    """
    树上全局向量求和

    上行：每个节点先取自身向量，再按编号升序加上各子树的部分和后发给父节点；
    下行：根把总和沿每条边广播一次。

    Args:
        tree: 生成树
        per_node: 按节点编号排列的 k 个向量

    Returns:
        VectorSumResult: 所有节点持有相同的总和

    Raises:
        InputError: 向量个数或维度不一致
    """
    if len(per_node) != tree.node_count:
        raise InputError(f"需要 {tree.node_count} 个节点向量，实际 {len(per_node)}")
    dimension = per_node[0].shape
    if any(vector.shape != dimension for vector in per_node):
        raise InputError("各节点向量维度不一致")

    messages: List[Message] = []
    partial: Dict[int, Vector] = {}
    for node in tree.upward_order:
        accumulated = np.array(per_node[node], dtype=np.float64)
        for child in tree.children[node]:
            accumulated = accumulated + partial.pop(child)
        partial[node] = accumulated
        if tree.parent[node] is not None:
            messages.append(Message(node, tree.parent[node], "up"))

    total = partial[tree.root]
    for node in tree.downward_order:
        for child in tree.children[node]:
            messages.append(Message(node, child, "down"))

    return VectorSumResult(total, [total.copy() for _ in range(tree.node_count)], messages)


def vector_sum_time(tree: SpanningTree, latency: float) -> float:
    """2 · depth · ℓ（上行加下行，每跳每方向 ℓ）"""
    if latency < 0:
        raise InputError(f"链路延迟不能为负: {latency}")
    return 2.0 * tree.depth * latency


@dataclass(frozen=True)
class MuEstimate:
    """
    一次向量求和期间到达的输入数

    属性：
    - raw: r · 求和时间（实数，供界计算使用）
    - mu: 向上取整后的整数
    - aligned: 向上取整到 k 的倍数
    """
    raw: float
    mu: int
    aligned: int


def compute_mu(tree: SpanningTree, latency: float, rate: float) -> MuEstimate:
    if not rate > 0:
        raise InputError(f"输入速率必须为正: {rate}")
    raw = rate * vector_sum_time(tree, latency)
    mu = int(math.ceil(raw))
    return MuEstimate(raw, mu, align_to_nodes(mu, tree.node_count))


def align_to_nodes(count: int, node_count: int) -> int:
    """向上取整到 node_count 的倍数"""
    return -(-count // node_count) * node_count
