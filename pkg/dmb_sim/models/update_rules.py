"""
更新规则 φ 与步长参数

每个规则都是 (state, g, α) 的确定性函数，返回下一个预测向量与新状态。
镜像下降的 L+β 与其余规则的 α 统一记为 α = L + β。
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import brentq, minimize

from .core import (BregmanGenerator, DiagonalGenerator, EuclideanGenerator, FeasibleSet,
                   SetKind, Vector)
from .errors import InputError, RunError, ScheduleError


@dataclass(frozen=True, eq=False)
class UpdateState:
    """
    更新规则的辅助状态 a_j

    属性：
    - point: 当前预测向量 w_j
    - grad_sum: 已见梯度之和 s = Σ g_i
    - step: 已执行的更新次数
    """
    point: Vector
    grad_sum: Vector
    step: int = 0

    @classmethod
    def initial(cls, point: Vector) -> "UpdateState":
        return cls(point=np.array(point, dtype=np.float64), grad_sum=np.zeros_like(point, dtype=np.float64))

    @property
    def dimension(self) -> int:
        return self.point.shape[0]


def _advance(state: UpdateState, w_next: Vector, grad_sum: Vector) -> Tuple[Vector, UpdateState]:
    if not np.all(np.isfinite(w_next)):
        raise RunError(f"第 {state.step + 1} 次更新产生了非有限值")
    return w_next, UpdateState(point=w_next, grad_sum=grad_sum, step=state.step + 1)


def _require_positive(alpha: float) -> None:
    if not alpha > 0:
        raise ScheduleError(f"步长参数 α 必须为正: {alpha}")


def _check_gradient(state: UpdateState, g: Vector) -> None:
    if g.shape != state.point.shape:
        raise InputError(f"梯度维度 {g.shape} 与状态维度 {state.point.shape} 不符")


# ==================== 闭式更新 ====================

def pgd_apply(state: UpdateState, g: Vector, alpha: float,
              feasible_set: FeasibleSet) -> Tuple[Vector, UpdateState]:
    """投影梯度：w_{j+1} = π_W(w_j − g/α)"""
    _require_positive(alpha)
    _check_gradient(state, g)
    w_next = feasible_set.project(state.point - g / alpha)
    return _advance(state, w_next, state.grad_sum + g)


def da_apply(state: UpdateState, g: Vector, alpha: float,
             feasible_set: FeasibleSet) -> Tuple[Vector, UpdateState]:
    """对偶平均：s_j = s_{j−1} + g，w_{j+1} = π_W(−s_j/α)"""
    _require_positive(alpha)
    _check_gradient(state, g)
    grad_sum = state.grad_sum + g
    w_next = feasible_set.project(-(grad_sum / alpha))
    return _advance(state, w_next, grad_sum)


def _diagonal_ball_step(point: Vector, g: Vector, total: float, weights: Vector, radius: float) -> Vector:
    """
    对角生成函数在球上的精确解

    KKT 条件给出 w(ν) = (t·d·a − g)/(t·d + 2ν)，‖w(ν)‖ 关于 ν 单调递减；
    无约束解可行时 ν = 0，否则在 [0, ‖t·d·a − g‖/(2R)] 上求 ‖w(ν)‖ = R 的根。
    """
    numerator = total * weights * point - g
    scaled = total * weights

    def candidate(nu: float) -> Vector:
        return numerator / (scaled + 2.0 * nu)

    free = candidate(0.0)
    if float(np.linalg.norm(free)) <= radius:
        return free
    upper = float(np.linalg.norm(numerator)) / (2.0 * radius)
    nu = brentq(lambda value: float(np.linalg.norm(candidate(value))) - radius, 0.0, upper,
                xtol=1e-300, rtol=4.0 * np.finfo(float).eps, maxiter=500)
    return candidate(nu)


def _mirror_step(state: UpdateState, g: Vector, total: float, generator: BregmanGenerator,
                 feasible_set: FeasibleSet) -> Vector:
    """argmin_w ⟨g,w⟩ + total·d(w, w_i)"""
    if generator.is_euclidean:
        return feasible_set.project(state.point - g / total)

    if isinstance(generator, DiagonalGenerator):
        if feasible_set.kind == SetKind.BALL:
            w = _diagonal_ball_step(state.point, g, total, generator.weights, feasible_set.radius)
            return feasible_set.project(w)
        # 可分离：逐坐标求解后截断
        return feasible_set.project(state.point - g / (total * generator.weights))

    # 不可分离的一般生成函数
    anchor = state.point
    anchor_grad = generator.gradient(anchor)

    def objective(w):
        return float(np.dot(g, w)) + total * generator.divergence(w, anchor)

    def jacobian(w):
        return g + total * (generator.gradient(w) - anchor_grad)

    constraints = []
    bounds = None
    if feasible_set.kind == SetKind.BALL:
        radius_sq = feasible_set.radius ** 2
        constraints.append({"type": "ineq",
                            "fun": lambda w: radius_sq - float(np.dot(w, w)),
                            "jac": lambda w: -2.0 * w})
    elif feasible_set.kind == SetKind.BOX:
        bounds = list(zip(feasible_set.lower, feasible_set.upper))

    result = minimize(objective, anchor, jac=jacobian, method="SLSQP", bounds=bounds,
                      constraints=constraints, options={"ftol": 1e-15, "maxiter": 500})
    if not result.success:
        logger.warning(f"镜像下降数值求解未完全收敛: {result.message}")
    return feasible_set.project(np.asarray(result.x, dtype=np.float64))


def md_apply(state: UpdateState, g: Vector, beta: float, smoothness: float,
             generator: BregmanGenerator, feasible_set: FeasibleSet) -> Tuple[Vector, UpdateState]:
    """
    随机镜像下降

    w_{i+1} = argmin_w ⟨g_i, w⟩ + (L+β_i)·d(w, w_i)。欧氏生成函数下退化为
    π_W(w_i − g/(L+β))。

    Raises:
        ScheduleError: β < 0、L < 0 或 L+β = 0
    """
    if beta < 0 or smoothness < 0:
        raise ScheduleError(f"β 与 L 必须非负: β={beta}, L={smoothness}")
    total = smoothness + beta
    _require_positive(total)
    _check_gradient(state, g)
    w_next = _mirror_step(state, g, total, generator, feasible_set)
    return _advance(state, w_next, state.grad_sum + g)


def composite_da_apply(state: UpdateState, g: Vector, alpha: float, lam: float) -> Tuple[Vector, UpdateState]:
    """
    ℓ1 复合对偶平均（无约束、欧氏 h）

    w_{j+1}[t] = −(j/α)·sign(ḡ_t)·max(|ḡ_t| − λ, 0)，ḡ = s_j/j。
    按 s_j 直接计算：−sign(s_t)·max(|s_t| − jλ, 0)/α，二者代数等价。
    |ḡ_t| = λ 时输出 0。
    """
    if lam < 0:
        raise InputError(f"λ 不能为负: {lam}")
    _require_positive(alpha)
    _check_gradient(state, g)
    j = state.step + 1
    grad_sum = state.grad_sum + g
    shrunk = np.sign(grad_sum) * np.maximum(np.abs(grad_sum) - j * lam, 0.0)
    w_next = -(shrunk / alpha)
    return _advance(state, w_next, grad_sum)


# ==================== 步长参数 ====================

class ScheduleKind(Enum):
    """步长参数类型"""
    SQRT = "sqrt"          # α_j = L + γ√j
    CONSTANT = "constant"  # α_j = L + β


@dataclass(frozen=True)
class Schedule:
    """
    步长参数 α_j

    属性：
    - kind: 参数类型
    - smoothness: 光滑常数 L
    - gamma: √j 系数 γ（SQRT 类型）
    - beta: 常数 β（CONSTANT 类型）
    - sigma_eff: 有效梯度标准差 σ/√b，仅作记录
    - diameter: 直径代理 D，仅作记录
    """
    kind: ScheduleKind
    smoothness: float
    gamma: float = 0.0
    beta: float = 0.0
    sigma_eff: float = 0.0
    diameter: float = 1.0

    def __post_init__(self):
        if self.smoothness < 0 or self.gamma < 0 or self.beta < 0:
            raise ScheduleError(f"L、γ、β 必须非负: L={self.smoothness}, γ={self.gamma}, β={self.beta}")
        if not self.alpha(1) > 0:
            raise ScheduleError("α_1 必须为正，请设置 L > 0 或非零的 γ/β")

    @classmethod
    def sqrt(cls, smoothness: float, gamma: float) -> "Schedule":
        return cls(ScheduleKind.SQRT, float(smoothness), gamma=float(gamma))

    @classmethod
    def sqrt_for(cls, smoothness: float, sigma: float, diameter: float, batch_size: int = 1) -> "Schedule":
        """α_j = L + (σ/(√b·D))√j"""
        sigma_eff = sigma / math.sqrt(batch_size)
        return cls(ScheduleKind.SQRT, float(smoothness), gamma=sigma_eff / diameter,
                   sigma_eff=sigma_eff, diameter=float(diameter))

    @classmethod
    def constant_for(cls, smoothness: float, sigma: float, h_star: float, horizon: int,
                     batch_size: int = 1) -> "Schedule":
        """β = (σ_eff/√(2h(w*)))·√m"""
        if not h_star > 0:
            raise ScheduleError(f"h(w*) 必须为正: {h_star}")
        sigma_eff = sigma / math.sqrt(batch_size)
        beta = sigma_eff / math.sqrt(2.0 * h_star) * math.sqrt(horizon)
        return cls(ScheduleKind.CONSTANT, float(smoothness), beta=beta,
                   sigma_eff=sigma_eff, diameter=math.sqrt(h_star))

    def alpha(self, j: int) -> float:
        if self.kind == ScheduleKind.SQRT:
            return self.smoothness + self.gamma * math.sqrt(j)
        return self.smoothness + self.beta

    def beta_at(self, j: int) -> float:
        """β_j = α_j − L"""
        if self.kind == ScheduleKind.SQRT:
            return self.gamma * math.sqrt(j)
        return self.beta

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "smoothness": self.smoothness, "gamma": self.gamma,
                "beta": self.beta, "sigma_eff": self.sigma_eff, "diameter": self.diameter}


def schedule_alpha(schedule: Schedule, j: int) -> float:
    if j < 1:
        raise InputError(f"步数 j 必须 ≥ 1: {j}")
    return schedule.alpha(j)


# ==================== 规则对象 ====================

class RuleKind(Enum):
    """更新规则类型"""
    PGD = "pgd"
    DA = "da"
    MD = "md"
    CDA = "cda"


class UpdateRule(ABC):
    """
    更新规则基类

    规则对象只绑定可行域等静态参数，状态全部在 UpdateState 中，
    因此同一规则可以被多个节点、多个试验共享。
    """
    kind: RuleKind

    def __init__(self, feasible_set: Optional[FeasibleSet] = None):
        self.feasible_set = feasible_set or FeasibleSet.unconstrained()

    def initial_state(self, dimension: int) -> UpdateState:
        """w₁ = argmin_W h，即原点在 W 上的投影"""
        return UpdateState.initial(self.feasible_set.project(np.zeros(dimension)))

    @abstractmethod
    def apply(self, state: UpdateState, g: Vector, alpha: float) -> Tuple[Vector, UpdateState]:
        pass

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "feasible_set": self.feasible_set.to_dict()}


class ProjectedGradientRule(UpdateRule):
    kind = RuleKind.PGD

    def apply(self, state, g, alpha):
        return pgd_apply(state, g, alpha, self.feasible_set)


class DualAveragingRule(UpdateRule):
    kind = RuleKind.DA

    def apply(self, state, g, alpha):
        return da_apply(state, g, alpha, self.feasible_set)


class MirrorDescentRule(UpdateRule):
    """按 α 调用时取 L+β = α，与投影梯度逐位一致"""
    kind = RuleKind.MD

    def __init__(self, feasible_set: Optional[FeasibleSet] = None,
                 generator: Optional[BregmanGenerator] = None, smoothness: float = 0.0):
        super().__init__(feasible_set)
        self.generator = generator or EuclideanGenerator()
        self.smoothness = smoothness

    def apply(self, state, g, alpha):
        _require_positive(alpha)
        if alpha < self.smoothness:
            raise ScheduleError(f"α={alpha} 小于 L={self.smoothness}，对应的 β = α − L 为负")
        _check_gradient(state, g)
        w_next = _mirror_step(state, g, alpha, self.generator, self.feasible_set)
        return _advance(state, w_next, state.grad_sum + g)

    def describe(self) -> Dict[str, Any]:
        data = super().describe()
        data["generator"] = type(self.generator).__name__
        data["smoothness"] = self.smoothness
        return data


class CompositeDualAveragingRule(UpdateRule):
    kind = RuleKind.CDA

    def __init__(self, lam: float):
        if lam < 0:
            raise InputError(f"λ 不能为负: {lam}")
        super().__init__(FeasibleSet.unconstrained())
        self.lam = lam

    def apply(self, state, g, alpha):
        return composite_da_apply(state, g, alpha, self.lam)

    def describe(self) -> Dict[str, Any]:
        data = super().describe()
        data["lambda"] = self.lam
        return data


def build_rule(kind: RuleKind, feasible_set: Optional[FeasibleSet] = None, smoothness: float = 0.0,
               lam: float = 0.0, generator: Optional[BregmanGenerator] = None) -> UpdateRule:
    """
    按类型构造更新规则

    Raises:
        InputError: ℓ1 复合规则配合了有约束的可行域
    """
    if kind == RuleKind.PGD:
        return ProjectedGradientRule(feasible_set)
    if kind == RuleKind.DA:
        return DualAveragingRule(feasible_set)
    if kind == RuleKind.MD:
        return MirrorDescentRule(feasible_set, generator, smoothness)
    if feasible_set is not None and feasible_set.kind != SetKind.UNCONSTRAINED:
        raise InputError("ℓ1 复合对偶平均只支持无约束可行域")
    return CompositeDualAveragingRule(lam)
