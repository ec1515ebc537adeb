"""
界与加速比计算器

所有期望后悔值界、最优性间隙界、批大小选择与加速比都在这里以可求值的
函数给出；命令行只调用这些函数，不重复实现公式。
"""

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from loguru import logger
from scipy.optimize import bisect

from .errors import InputError, SolverError


@dataclass(frozen=True)
class BoundParams:
    """
    界计算参数

    属性：
    - sigma2: 梯度方差 σ²
    - horizon: 输入数 m
    - diameter: 直径代理 D
    - smoothness: 光滑常数 L
    - initial_gap: F(w₁) − F(w*)，None 时使用简化形式
    - batch_size: 批大小 b
    - latency_gap: 每次向量求和期间到达的输入数 μ（允许实数）
    - nodes: 节点数 k
    - delta: 向量求和延迟 δ（时间单位）
    - rho: 批大小增长指数 ρ
    - theta: 批大小系数 θ
    """
    sigma2: float = 1.0
    horizon: float = 1.0
    diameter: float = 1.0
    smoothness: float = 1.0
    initial_gap: Optional[float] = None
    batch_size: float = 1.0
    latency_gap: float = 0.0
    nodes: int = 1
    delta: float = 0.0
    rho: float = 1.0 / 3.0
    theta: float = 1.0

    def __post_init__(self):
        for name in ("sigma2", "horizon", "diameter", "smoothness", "batch_size",
                     "latency_gap", "delta", "rho", "theta"):
            if getattr(self, name) < 0:
                raise InputError(f"参数 {name} 不能为负: {getattr(self, name)}")
        if not self.batch_size > 0:
            raise InputError(f"批大小必须为正: {self.batch_size}")
        if self.nodes < 1:
            raise InputError(f"节点数必须 ≥ 1: {self.nodes}")
        if self.initial_gap is not None and self.initial_gap < 0:
            raise InputError(f"初始间隙不能为负: {self.initial_gap}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def with_(self, **changes) -> "BoundParams":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _require_growth_exponent(rho: float) -> None:
    if not 0.0 < rho < 0.5:
        raise InputError(f"ρ 必须在 (0, 1/2) 内: {rho}")


# ==================== 后悔值界 ====================

def psi(sigma2: float, m: float, diameter: float, smoothness: float,
        initial_gap: Optional[float] = None) -> float:
    """
    串行界 ψ(σ², m)

    有初始间隙时为 F₀ + D²L + 2Dσ√m，否则为简化形式 2D²L + 2Dσ√m。
    """
    noise = 2.0 * diameter * math.sqrt(sigma2) * math.sqrt(m)
    if initial_gap is None:
        return 2.0 * diameter ** 2 * smoothness + noise
    return initial_gap + diameter ** 2 * smoothness + noise


def psi_serial(p: BoundParams) -> float:
    if p.horizon < 1:
        raise InputError(f"m 必须 ≥ 1: {p.horizon}")
    return psi(p.sigma2, p.horizon, p.diameter, p.smoothness, p.initial_gap)


@dataclass(frozen=True)
class MinibatchBound:
    """b·ψ(σ²/b, ⌈m/b⌉) 与闭式 2bD²L + 2Dσ√(m+b)"""
    general: float
    closed_form: float


def psi_minibatch(p: BoundParams) -> MinibatchBound:
    b, m = p.batch_size, p.horizon
    general = b * psi(p.sigma2 / b, math.ceil(m / b), p.diameter, p.smoothness)
    closed = 2.0 * b * p.diameter ** 2 * p.smoothness + 2.0 * p.diameter * p.sigma * math.sqrt(m + b)
    return MinibatchBound(general, closed)


@dataclass(frozen=True)
class DmbBound:
    """
    DMB 后悔值界的几种形式

    属性：
    - general: (b+μ)·ψ(σ²/b, ⌈m/(b+μ)⌉)
    - intermediate: 2(b+μ)D²L + 2Dσ√(m + μm/b + (b+μ)²/b)
    - expanded: 四项展开 2(b+μ)D²L + 2Dσ√m + 2Dσ√(μm/b) + 2Dσ(b+μ)/√b
    - cube_root: b = m^{1/3} 时的五项展开
    """
    general: float
    intermediate: float
    expanded: float
    cube_root: float


def dmb_cube_root_bound(m: float, mu: float, diameter: float, smoothness: float, sigma: float) -> float:
    """b = m^{1/3} 时的五项展开"""
    return (2.0 * diameter * sigma * math.sqrt(m)
            + 2.0 * diameter * m ** (1.0 / 3.0) * (smoothness * diameter + sigma * math.sqrt(mu))
            + 2.0 * diameter * sigma * m ** (1.0 / 6.0)
            + 2.0 * diameter * sigma * mu * m ** (-1.0 / 6.0)
            + 2.0 * mu * diameter ** 2 * smoothness)


def psi_dmb(p: BoundParams) -> DmbBound:
    b, mu, m = p.batch_size, p.latency_gap, p.horizon
    D, L, sigma = p.diameter, p.smoothness, p.sigma
    cycle = b + mu
    general = cycle * psi(p.sigma2 / b, math.ceil(m / cycle), D, L)
    intermediate = 2.0 * cycle * D ** 2 * L + 2.0 * D * sigma * math.sqrt(m + mu * m / b + cycle ** 2 / b)
    expanded = (2.0 * cycle * D ** 2 * L + 2.0 * D * sigma * math.sqrt(m)
                + 2.0 * D * sigma * math.sqrt(mu * m / b) + 2.0 * D * sigma * cycle / math.sqrt(b))
    return DmbBound(general, intermediate, expanded, dmb_cube_root_bound(m, mu, D, L, sigma))


def fixed_batch_dominant_term(p: BoundParams) -> float:
    """固定 b 时后悔值界的主导项 2Dσ√(μm/b)（μ 随 log k 增长）"""
    return 2.0 * p.diameter * p.sigma * math.sqrt(p.latency_gap * p.horizon / p.batch_size)


def psi_nocomm(p: BoundParams) -> float:
    k = p.nodes
    return (2.0 * k * p.diameter ** 2 * p.smoothness
            + 2.0 * p.diameter * p.sigma * k * math.sqrt(math.ceil(p.horizon / k)))


def psi_interlaced(p: BoundParams) -> float:
    """c = 1 + μ/b 个交错实例：bc·ψ(σ²/b, 1 + m/(bc))"""
    b = p.batch_size
    instances = 1.0 + p.latency_gap / b
    return b * instances * psi(p.sigma2 / b, 1.0 + p.horizon / (b * instances), p.diameter, p.smoothness)


# ==================== 批大小选择 ====================

class BatchMode(Enum):
    """批大小选择方式"""
    FIXED = "fixed"
    DOUBLING = "doubling"


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _clamp_to_nodes(b: int, nodes: Optional[int]) -> int:
    b = max(b, 1)
    if nodes:
        b = max(nodes, -(-b // nodes) * nodes)
    return b


def select_batch_size(m: int, mode: BatchMode = BatchMode.FIXED, rho: float = 1.0 / 3.0,
                      nodes: Optional[int] = None) -> Union[int, List[int]]:
    """
    按 b = m^ρ 选择批大小（四舍五入，0.5 向上）

    Args:
        m: 输入数
        mode: FIXED 返回单个批大小；DOUBLING 返回各倍增周期的批大小 b_e = (2^e)^ρ
        rho: 增长指数
        nodes: 绑定拓扑时的节点数，结果向上取整到其倍数

    Returns:
        Union[int, List[int]]: FIXED 时为批大小，DOUBLING 时为按周期排列的批大小
    """
    if m < 1:
        raise InputError(f"m 必须 ≥ 1: {m}")
    _require_growth_exponent(rho)
    if mode == BatchMode.DOUBLING:
        return [entry[3] for entry in doubling_schedule(m, rho, nodes)]
    return _clamp_to_nodes(_round_half_up(m ** rho), nodes)


def doubling_schedule(m: int, rho: float = 1.0 / 3.0, nodes: Optional[int] = None) -> List[Tuple[int, int, int, int]]:
    """
    倍增技巧的分段批大小

    Returns:
        List[Tuple[int, int, int, int]]: (周期 e, 起始输入序号, 周期长度 2^e, 批大小 b_e)
    """
    _require_growth_exponent(rho)
    schedule = []
    start = 0
    epoch = 0
    while start < m:
        length = 2 ** epoch
        schedule.append((epoch, start, length, _clamp_to_nodes(_round_half_up(length ** rho), nodes)))
        start += length
        epoch += 1
    return schedule


def nearest_power_of_two(value: float) -> int:
    return 2 ** int(round(math.log2(max(value, 1.0))))


# ==================== 最优性间隙界 ====================

def gap_bound(p: BoundParams) -> float:
    """2bD²L/m + 2Dσ/√m"""
    m = p.horizon
    return 2.0 * p.batch_size * p.diameter ** 2 * p.smoothness / m + 2.0 * p.diameter * p.sigma / math.sqrt(m)


def accelerated_gap_bound(p: BoundParams) -> float:
    """加速方法的间隙界 4b²D²L/m² + 4Dσ/√m（仅计算器）"""
    m = p.horizon
    return (4.0 * p.batch_size ** 2 * p.diameter ** 2 * p.smoothness / m ** 2
            + 4.0 * p.diameter * p.sigma / math.sqrt(m))


def strongly_convex_gap_rate(p: BoundParams, modulus: float) -> float:
    """ν-强凸损失下的速率 b²L/m² + σ²/(νm)，常数取 1"""
    if not modulus > 0:
        raise InputError(f"强凸参数必须为正: {modulus}")
    m = p.horizon
    return p.batch_size ** 2 * p.smoothness / m ** 2 + p.sigma2 / (modulus * m)


# ==================== 加速比 ====================

def speedup_samples(k: int, delta: float, b: float) -> float:
    """S(m) = k / (1 + δk/b)"""
    if k < 1 or delta < 0 or not b > 0:
        raise InputError(f"非法参数: k={k}, δ={delta}, b={b}")
    return k / (1.0 + delta * k / b)


def m_srl(eps: float, p: BoundParams) -> float:
    """
    串行算法达到间隙 ε 所需样本数

    (D²σ²/ε²)(1 + √(1 + 2Lε/σ²))²；σ = 0 时退化为 2D²L/ε。
    """
    if not eps > 0:
        raise InputError(f"ε 必须为正: {eps}")
    D, L = p.diameter, p.smoothness
    if p.sigma2 == 0:
        return 2.0 * D ** 2 * L / eps
    return (D ** 2 * p.sigma2 / eps ** 2) * (1.0 + math.sqrt(1.0 + 2.0 * L * eps / p.sigma2)) ** 2


def _dmb_gap_residual(m: float, eps: float, p: BoundParams) -> float:
    return (2.0 * p.diameter * p.sigma / math.sqrt(m)) * (1.0 + p.theta / m ** (0.5 - p.rho)) - eps


def m_dmb(eps: float, p: BoundParams, lower: float = 1.0, upper: float = 1e18,
          max_widenings: int = 40) -> float:
    """
    DMB（b(m) = (θσ/DL)m^ρ）达到间隙 ε 所需样本数

    在 log m 上二分求解 (2Dσ/√m)(1 + θ/m^{½−ρ}) = ε，相对精度 1e-9；
    区间不能括住根时按 10⁶ 倍几何扩展。

    Raises:
        InputError: ε、σ、θ、ρ 不合法
        SolverError: 扩展后仍无法括住根
    """
    if not eps > 0:
        raise InputError(f"ε 必须为正: {eps}")
    _require_growth_exponent(p.rho)
    if not p.theta > 0 or not p.sigma2 > 0:
        raise InputError(f"θ 与 σ² 必须为正: θ={p.theta}, σ²={p.sigma2}")

    def residual(log_m: float) -> float:
        return _dmb_gap_residual(math.exp(log_m), eps, p)

    low, high = math.log(lower), math.log(upper)
    step = math.log(1e6)
    for _ in range(max_widenings):
        if residual(low) > 0:
            break
        low -= step
    for _ in range(max_widenings):
        if residual(high) < 0:
            break
        high += step
    if not (residual(low) > 0 > residual(high)):
        raise SolverError(f"无法括住 m_dmb 的根: ε={eps}, 区间 [e^{low:.1f}, e^{high:.1f}]")

    root = bisect(residual, low, high, xtol=1e-9, maxiter=200)
    return math.exp(root)


def batch_for_horizon(m: float, p: BoundParams) -> float:
    """b(m) = (θσ/(DL))·m^ρ"""
    if not p.smoothness > 0:
        raise InputError("b(m) 需要 L > 0")
    return p.theta * p.sigma / (p.diameter * p.smoothness) * m ** p.rho


def speedup_eps(eps: float, p: BoundParams) -> float:
    """S(ε) = m_srl(ε) / ((m_dmb(ε)/b)(b/k + δ))，b = b(m_dmb(ε))"""
    serial = m_srl(eps, p)
    distributed = m_dmb(eps, p)
    b = batch_for_horizon(distributed, p)
    return serial / ((distributed / b) * (b / p.nodes + p.delta))


@dataclass(frozen=True)
class SpeedupRow:
    """加速比表的一行"""
    eps: float
    serial_samples: float
    dmb_samples: float
    batch_size: float
    speedup: float


def speedup_table(p: BoundParams, eps_values: List[float]) -> List[SpeedupRow]:
    rows = []
    for eps in eps_values:
        distributed = m_dmb(eps, p)
        rows.append(SpeedupRow(eps, m_srl(eps, p), distributed, batch_for_horizon(distributed, p),
                               speedup_eps(eps, p)))
    logger.debug(f"加速比表完成: k={p.nodes}, {len(rows)} 行")
    return rows
