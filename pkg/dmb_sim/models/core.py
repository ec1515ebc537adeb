"""
核心数学对象

包括：
- 向量校验与可行域投影
- 逻辑斯蒂损失与二次损失（批量与单样本两种形式）
- Bregman 散度生成函数
- 合成问题（二次问题、稀疏逻辑斯蒂数据流）
- 基于计数器的可拆分随机数流
"""

import math
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy.special import expit

from .errors import InputError, RunError

Vector = np.ndarray

_LN2 = math.log(2.0)
_UINT64_MASK = (1 << 64) - 1


def as_vector(values, dimension: Optional[int] = None, name: str = "vector") -> Vector:
    """
    转换为一维 float64 向量并校验

    Args:
        values: 任意可转为数组的序列
        dimension: 期望维度，None 表示不检查
        name: 出错时使用的名称

    Returns:
        Vector: 新的一维数组

    Raises:
        InputError: 维度不符或包含 NaN/∞
    """
    vector = np.array(values, dtype=np.float64)
    if vector.ndim != 1:
        raise InputError(f"{name} 必须是一维向量，实际形状 {vector.shape}")
    if dimension is not None and vector.shape[0] != dimension:
        raise InputError(f"{name} 维度为 {vector.shape[0]}，期望 {dimension}")
    if not np.all(np.isfinite(vector)):
        raise InputError(f"{name} 包含非有限值")
    return vector


# ==================== 随机数 ====================

@dataclass(frozen=True)
class Rng:
    """
    可拆分的确定性随机数流

    (seed, stream) 唯一确定一条 Philox 序列，与调用顺序和平台无关。

    属性：
    - seed: 64 位种子
    - stream: 流标识路径
    """
    seed: int
    stream: Tuple[int, ...] = ()

    def child(self, *keys: Union[int, str]) -> "Rng":
        """派生子流，字符串键经 CRC32 转为整数"""
        path = list(self.stream)
        for key in keys:
            if isinstance(key, str):
                path.append(zlib.crc32(key.encode("utf-8")))
            else:
                path.append(int(key))
        return Rng(self.seed, tuple(path))

    def generator(self) -> np.random.Generator:
        """构造该流的 numpy 生成器，每次调用都从流的起点开始"""
        sequence = np.random.SeedSequence(self.seed & _UINT64_MASK, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(sequence))


# ==================== 可行域 ====================

class SetKind(Enum):
    """可行域类型"""
    UNCONSTRAINED = "unconstrained"
    BALL = "ball"
    BOX = "box"


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """
    闭凸可行域 W

    属性：
    - kind: 可行域类型
    - radius: 欧氏球半径 C（球心为原点）
    - lower: 盒约束下界
    - upper: 盒约束上界
    """
    kind: SetKind = SetKind.UNCONSTRAINED
    radius: float = math.inf
    lower: Optional[Vector] = None
    upper: Optional[Vector] = None

    def __post_init__(self):
        if self.kind == SetKind.BALL and not (self.radius > 0 and math.isfinite(self.radius)):
            raise InputError(f"球半径必须为正有限值: {self.radius}")
        if self.kind == SetKind.BOX:
            if self.lower is None or self.upper is None or self.lower.shape != self.upper.shape:
                raise InputError("盒约束需要同维度的上下界")
            if np.any(self.lower > self.upper):
                raise InputError("盒约束下界必须逐坐标不大于上界")

    @classmethod
    def unconstrained(cls) -> "FeasibleSet":
        return cls()

    @classmethod
    def ball(cls, radius: float) -> "FeasibleSet":
        return cls(kind=SetKind.BALL, radius=float(radius))

    @classmethod
    def box(cls, lower, upper) -> "FeasibleSet":
        return cls(kind=SetKind.BOX, lower=as_vector(lower, name="lower"),
                   upper=as_vector(upper, name="upper"))

    def project(self, v: Vector) -> Vector:
        """欧氏投影 π_W(v)"""
        if self.kind == SetKind.UNCONSTRAINED:
            return np.array(v, dtype=np.float64)
        if self.kind == SetKind.BALL:
            norm = float(np.linalg.norm(v))
            if norm <= self.radius:
                return np.array(v, dtype=np.float64)
            return (v / norm) * self.radius
        if v.shape != self.lower.shape:
            raise InputError(f"向量维度 {v.shape[0]} 与盒约束维度 {self.lower.shape[0]} 不符")
        return np.clip(v, self.lower, self.upper)

    def contains(self, v: Vector, tol: float = 1e-12) -> bool:
        if self.kind == SetKind.UNCONSTRAINED:
            return True
        if self.kind == SetKind.BALL:
            return float(np.linalg.norm(v)) <= self.radius + tol
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def diameter(self) -> float:
        """D = √(max‖u−v‖²/2)"""
        if self.kind == SetKind.UNCONSTRAINED:
            return math.inf
        if self.kind == SetKind.BALL:
            return self.radius * math.sqrt(2.0)
        return math.sqrt(float(np.sum((self.upper - self.lower) ** 2)) / 2.0)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value}
        if self.kind == SetKind.BALL:
            data["radius"] = self.radius
        if self.kind == SetKind.BOX:
            data["lower"] = self.lower.tolist()
            data["upper"] = self.upper.tolist()
        return data


def project(feasible_set: FeasibleSet, v) -> Vector:
    """π_W(v)，返回新数组"""
    return feasible_set.project(as_vector(v, name="v"))


# ==================== 损失函数 ====================

class LossKind(Enum):
    """损失函数族"""
    LOGISTIC = "logistic"
    QUADRATIC = "quadratic"


def _check_batch(w: Vector, Z: np.ndarray) -> None:
    if Z.ndim != 2 or Z.shape[1] != w.shape[0]:
        raise InputError(f"输入形状 {Z.shape} 与预测向量维度 {w.shape[0]} 不符")


def logistic_losses(w: Vector, Z: np.ndarray) -> np.ndarray:
    """逐行计算 log₂(1 + exp(−⟨w,z⟩))"""
    _check_batch(w, Z)
    margins = Z @ w
    return np.logaddexp(0.0, -margins) / _LN2


def logistic_gradients(w: Vector, Z: np.ndarray) -> np.ndarray:
    """逐行计算 −z / (ln2 · (1 + exp(⟨w,z⟩)))"""
    _check_batch(w, Z)
    margins = Z @ w
    scale = -expit(-margins) / _LN2
    return scale[:, None] * Z


def quadratic_losses(w: Vector, Z: np.ndarray) -> np.ndarray:
    """逐行计算 ½‖w − z‖²"""
    _check_batch(w, Z)
    diff = w[None, :] - Z
    return 0.5 * np.einsum("ij,ij->i", diff, diff)


def quadratic_gradients(w: Vector, Z: np.ndarray) -> np.ndarray:
    """逐行计算 w − z"""
    _check_batch(w, Z)
    return w[None, :] - Z


def _single(batch_fn: Callable, w, z) -> Any:
    w = as_vector(w, name="w")
    z = as_vector(z, dimension=w.shape[0], name="z")
    return batch_fn(w, z[None, :])[0]


def logistic_loss(w, z) -> float:
    return float(_single(logistic_losses, w, z))


def logistic_grad(w, z) -> Vector:
    return np.array(_single(logistic_gradients, w, z))


def quadratic_loss(w, z) -> float:
    return float(_single(quadratic_losses, w, z))


def quadratic_grad(w, z) -> Vector:
    return np.array(_single(quadratic_gradients, w, z))


_LOSS_TABLE = {
    LossKind.LOGISTIC: (logistic_losses, logistic_gradients),
    LossKind.QUADRATIC: (quadratic_losses, quadratic_gradients),
}


# ==================== Bregman 散度 ====================

class BregmanGenerator(ABC):
    """
    强凸生成函数 h

    约定 min h = 0 且在原点取得，d(u,v) = h(u) − h(v) − ⟨∇h(v), u−v⟩。
    """

    @abstractmethod
    def value(self, w: Vector) -> float:
        pass

    @abstractmethod
    def gradient(self, w: Vector) -> Vector:
        pass

    def divergence(self, u: Vector, v: Vector) -> float:
        return float(self.value(u) - self.value(v) - np.dot(self.gradient(v), u - v))

    @property
    def is_euclidean(self) -> bool:
        return False


class EuclideanGenerator(BregmanGenerator):
    """h(w) = ½‖w‖²"""

    def value(self, w: Vector) -> float:
        return 0.5 * float(np.dot(w, w))

    def gradient(self, w: Vector) -> Vector:
        return np.array(w, dtype=np.float64)

    def divergence(self, u: Vector, v: Vector) -> float:
        diff = u - v
        return 0.5 * float(np.dot(diff, diff))

    @property
    def is_euclidean(self) -> bool:
        return True


class DiagonalGenerator(BregmanGenerator):
    """
    对角加权 h(w) = ½ Σ dᵢ wᵢ²

    权重不小于 1 时关于欧氏范数 1-强凸。
    """

    def __init__(self, weights):
        self.weights = as_vector(weights, name="weights")
        if np.any(self.weights < 1.0):
            raise InputError("对角权重必须不小于 1 以保证 1-强凸")

    def value(self, w: Vector) -> float:
        return 0.5 * float(np.dot(self.weights * w, w))

    def gradient(self, w: Vector) -> Vector:
        return self.weights * w


def bregman(generator: BregmanGenerator, u, v) -> float:
    """d_h(u, v)"""
    u = as_vector(u, name="u")
    v = as_vector(v, dimension=u.shape[0], name="v")
    return generator.divergence(u, v)


# ==================== 输入源 ====================

class InputSampler(ABC):
    """
    i.i.d. 输入源

    draw 的 offset 参数只对有限回放源有意义，随机源忽略它。
    """
    dimension: int
    finite: bool = False

    @abstractmethod
    def draw(self, gen: np.random.Generator, count: int, offset: int = 0) -> np.ndarray:
        pass

    def describe(self) -> Dict[str, Any]:
        return {"sampler": type(self).__name__, "dimension": self.dimension}


class GaussianSampler(InputSampler):
    """z ~ Normal(mean, scale² I)；scale 为 0 时输出恒为 mean"""

    def __init__(self, mean, scale: float):
        self.mean = as_vector(mean, name="mean")
        self.scale = float(scale)
        self.dimension = self.mean.shape[0]

    def draw(self, gen: np.random.Generator, count: int, offset: int = 0) -> np.ndarray:
        noise = gen.standard_normal((count, self.dimension))
        return self.mean[None, :] + self.scale * noise


class LogisticSampler(InputSampler):
    """
    稀疏二值特征的分类数据流

    每个 x 恰有 sparsity 个 1；y = ±1 由 sigmoid(⟨w°,x⟩) 的伯努利决定，
    再以 label_noise 概率翻转；输出 z = y·x。
    """

    def __init__(self, truth: Vector, sparsity: int, label_noise: float):
        self.truth = truth
        self.sparsity = int(sparsity)
        self.label_noise = float(label_noise)
        self.dimension = truth.shape[0]

    def draw(self, gen: np.random.Generator, count: int, offset: int = 0) -> np.ndarray:
        n = self.dimension
        keys = gen.random((count, n))
        active = np.argpartition(keys, self.sparsity - 1, axis=1)[:, :self.sparsity]
        features = np.zeros((count, n))
        np.put_along_axis(features, active, 1.0, axis=1)

        positive = gen.random(count) < expit(features @ self.truth)
        labels = np.where(positive, 1.0, -1.0)
        flips = gen.random(count) < self.label_noise
        labels = np.where(flips, -labels, labels)
        return labels[:, None] * features

    def describe(self) -> Dict[str, Any]:
        return {"sampler": "LogisticSampler", "dimension": self.dimension,
                "sparsity": self.sparsity, "label_noise": self.label_noise}


class ReplaySampler(InputSampler):
    """有限回放源，按到达序号返回预先给定的输入"""
    finite = True

    def __init__(self, inputs):
        self.inputs = np.array(inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise InputError("回放输入必须是二维数组")
        self.dimension = self.inputs.shape[1]

    def draw(self, gen: np.random.Generator, count: int, offset: int = 0) -> np.ndarray:
        return self.inputs[offset:offset + count]


class InputStream:
    """
    按到达顺序分发输入

    以固定块大小从输入源预取，因此无论调用方如何分块读取，
    第 i 个输入都相同。
    """

    BLOCK_SIZE = 512

    def __init__(self, sampler: InputSampler, rng: Rng, block_size: int = BLOCK_SIZE):
        self.sampler = sampler
        self.block_size = block_size
        self._gen = rng.generator()
        self._buffer = np.empty((0, sampler.dimension))
        self._cursor = 0
        self.drawn = 0
        self.consumed = 0

    def take(self, count: int) -> np.ndarray:
        """
        取出接下来的 count 个输入

        Raises:
            RunError: 有限输入源耗尽
        """
        while self._buffer.shape[0] - self._cursor < count:
            chunk = self.sampler.draw(self._gen, self.block_size, offset=self.drawn)
            if chunk.shape[0] == 0:
                raise RunError(f"输入源已耗尽：已提供 {self.drawn} 个输入，还需要 {count}")
            self.drawn += chunk.shape[0]
            self._buffer = np.concatenate([self._buffer[self._cursor:], chunk])
            self._cursor = 0

        block = self._buffer[self._cursor:self._cursor + count]
        self._cursor += count
        self.consumed += count
        return block


# ==================== 问题定义 ====================

@dataclass
class Problem:
    """
    随机优化问题

    属性：
    - loss: 损失函数族
    - dimension: 维度 n
    - smoothness: 光滑常数 L
    - grad_variance: 梯度方差上界 σ²
    - diameter: 直径代理 D
    - sampler: i.i.d. 输入源
    - minimizer: 已知最优解 w*（可选）
    - expected_loss: F 的闭式计算（可选）
    - expected_grad: ∇F 的闭式计算（可选）
    - params: 构造参数，用于摘要
    """
    loss: LossKind
    dimension: int
    smoothness: float
    grad_variance: float
    diameter: float
    sampler: InputSampler
    minimizer: Optional[Vector] = None
    expected_loss: Optional[Callable[[Vector], float]] = None
    expected_grad: Optional[Callable[[Vector], Vector]] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.smoothness < 0 or self.grad_variance < 0:
            raise InputError("L 与 σ² 必须非负")
        if not self.diameter > 0:
            raise InputError(f"直径代理 D 必须为正: {self.diameter}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.grad_variance)

    @property
    def has_closed_form(self) -> bool:
        return self.expected_loss is not None and self.minimizer is not None

    def losses(self, w: Vector, Z: np.ndarray) -> np.ndarray:
        return _LOSS_TABLE[self.loss][0](w, Z)

    def gradients(self, w: Vector, Z: np.ndarray) -> np.ndarray:
        return _LOSS_TABLE[self.loss][1](w, Z)

    def comparator_losses(self, Z: np.ndarray) -> Optional[np.ndarray]:
        """f(w*, z)，未知 w* 时返回 None"""
        if self.minimizer is None:
            return None
        return self.losses(self.minimizer, Z)

    def check_stationarity(self, step: float = 1e-5) -> float:
        """
        用中心差分估计 ‖∇F(w*)‖

        Raises:
            InputError: 缺少 w* 或 F 闭式
        """
        if not self.has_closed_form:
            raise InputError("缺少 w* 或 F 闭式，无法检查驻点")
        grad = np.zeros(self.dimension)
        for index in range(self.dimension):
            offset = np.zeros(self.dimension)
            offset[index] = step
            grad[index] = (self.expected_loss(self.minimizer + offset)
                           - self.expected_loss(self.minimizer - offset)) / (2 * step)
        return float(np.linalg.norm(grad))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loss": self.loss.value,
            "dimension": self.dimension,
            "smoothness": self.smoothness,
            "grad_variance": self.grad_variance,
            "diameter": self.diameter,
            "minimizer": None if self.minimizer is None else self.minimizer.tolist(),
            "params": dict(self.params),
        }


def quadratic_problem(n: int, sigma_z: float, w_star=None, diameter: float = 1.0) -> Problem:
    """
    二次损失测试问题

    z ~ Normal(w*, σ_z² I)，f(w,z) = ½‖w−z‖²，L = 1，σ² = nσ_z²，
    F(w) = ½‖w−w*‖² + ½nσ_z²。

    Args:
        n: 维度
        sigma_z: 每个坐标的噪声标准差
        w_star: 最优解，默认为单位范数的均匀向量
        diameter: 直径代理 D

    Returns:
        Problem: 构造好的问题
    """
    if n < 1:
        raise InputError(f"维度必须为正: {n}")
    if sigma_z < 0:
        raise InputError(f"σ_z 不能为负: {sigma_z}")
    if w_star is None:
        w_star = np.full(n, 1.0 / math.sqrt(n))
    w_star = as_vector(w_star, dimension=n, name="w_star")
    noise_floor = 0.5 * n * sigma_z ** 2

    def expected_loss(w: Vector) -> float:
        diff = w - w_star
        return 0.5 * float(np.dot(diff, diff)) + noise_floor

    def expected_grad(w: Vector) -> Vector:
        return w - w_star

    return Problem(
        loss=LossKind.QUADRATIC,
        dimension=n,
        smoothness=1.0,
        grad_variance=n * sigma_z ** 2,
        diameter=float(diameter),
        sampler=GaussianSampler(w_star, sigma_z),
        minimizer=w_star,
        expected_loss=expected_loss,
        expected_grad=expected_grad,
        params={"kind": "quadratic", "n": n, "sigma_z": sigma_z},
    )


def logistic_stream(rng: Rng, n: int, sparsity: int, ground_truth_density: float,
                    label_noise: float, diameter: float = 1.0,
                    variance_samples: int = 20000) -> Problem:
    """
    稀疏逻辑斯蒂数据流

    L 取保守值 max‖z‖²/(4 ln 2) = sparsity/(4 ln 2)；σ² 为在 0 与 w° 两个探测点上
    经验方差的较大者乘以 2。

    Args:
        rng: 随机数流，w° 与方差估计各用一条子流
        n: 特征维度
        sparsity: 每个输入中非零特征数
        ground_truth_density: w° 非零坐标比例
        label_noise: 标签翻转概率
        diameter: 直径代理 D
        variance_samples: 方差估计样本数

    Returns:
        Problem: w* 未知的问题
    """
    if not 0 < sparsity <= n:
        raise InputError(f"稀疏度必须满足 0 < sparsity ≤ n: sparsity={sparsity}, n={n}")
    if not 0.0 <= ground_truth_density <= 1.0:
        raise InputError(f"w° 密度必须在 [0, 1]: {ground_truth_density}")
    if not 0.0 <= label_noise <= 0.5:
        raise InputError(f"标签噪声必须在 [0, 0.5]: {label_noise}")

    truth_gen = rng.child("truth").generator()
    mask = truth_gen.random(n) < ground_truth_density
    truth = truth_gen.standard_normal(n) * mask

    problem = Problem(
        loss=LossKind.LOGISTIC,
        dimension=n,
        smoothness=sparsity / (4.0 * _LN2),
        grad_variance=0.0,
        diameter=float(diameter),
        sampler=LogisticSampler(truth, sparsity, label_noise),
        params={"kind": "logistic", "n": n, "sparsity": sparsity,
                "ground_truth_density": ground_truth_density, "label_noise": label_noise},
    )

    from .minibatch import empirical_avg_grad_variance

    estimates = [
        empirical_avg_grad_variance(problem, anchor, 1, variance_samples, rng.child("variance", index))
        for index, anchor in enumerate((np.zeros(n), truth))
    ]
    problem.grad_variance = 2.0 * max(estimates)
    logger.debug(f"逻辑斯蒂数据流 σ² 估计: {estimates} -> {problem.grad_variance:.6g}")
    return problem
