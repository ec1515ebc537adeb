"""
实验配置

配置文件为扁平的 key=value 文本，键带分区前缀（problem. / rule. / net. /
run. / analysis.）；优先级：默认值 < 配置文件 < 命令行参数。
"""

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

from loguru import logger

from ..models.errors import ConfigError

OUTPUT_DIR_ENV = "DMB_SIM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "data/dmb_sim"

RUN_COMMANDS = ("serial", "minibatch", "dmb", "nocomm", "interlaced", "opt", "compare",
                "sweep-batch", "sweep-latency")
ANALYSIS_COMMANDS = ("bounds", "speedup")
NETWORK_COMMANDS = ("dmb", "interlaced", "opt", "compare", "sweep-batch", "sweep-latency")


@dataclass
class ProblemSpec:
    """
    问题配置

    属性：
    - kind: quadratic / logistic
    - n: 维度
    - sigma_z: 二次问题每坐标噪声
    - diameter: 直径代理 D
    - sparsity: 逻辑斯蒂输入的非零特征数
    - density: w° 的非零比例
    - label_noise: 标签翻转概率
    """
    kind: str = "quadratic"
    n: int = 2
    sigma_z: float = 1.0
    diameter: float = 1.0
    sparsity: int = 5
    density: float = 0.2
    label_noise: float = 0.05


@dataclass
class RuleSpec:
    """
    更新规则与步长配置

    smoothness 与 gamma 为 None 时分别取问题的 L 与 σ/(√b·D)。
    """
    kind: str = "da"
    schedule: str = "sqrt"
    smoothness: Optional[float] = None
    gamma: Optional[float] = None
    lam: float = 0.0
    feasible_set: str = "unconstrained"
    radius: float = 10.0


@dataclass
class NetworkSpec:
    """
    网络配置

    mu 为 None 时由拓扑、延迟与速率计算。
    """
    topology: str = "star"
    k: int = 1
    latency: float = 0.5
    rate: float = 4.0
    arity: int = 2
    path: Optional[str] = None
    mu: Optional[int] = None
    root: int = 0
    root_broadcast: bool = False
    align_mu: bool = False


@dataclass
class AnalysisSpec:
    """界计算参数（bounds / speedup 命令；rho 也用于 dmb 的倍增模式）"""
    sigma2: float = 1.0
    diameter: float = 1.0
    smoothness: float = 1.0
    initial_gap: Optional[float] = None
    delta: Optional[float] = None
    rho: float = 1.0 / 3.0
    theta: float = 1.0
    modulus: Optional[float] = None
    eps_list: List[float] = field(default_factory=lambda: [10.0 ** -p for p in range(1, 11)])


@dataclass
class ExperimentConfig:
    """
    一次实验的完整配置

    属性：
    - command: 命令名
    - problem / rule / net / analysis: 分区配置
    - m: 输入数
    - b: 批大小
    - b_list: 批大小扫描列表
    - batch_mode: fixed 使用 b；doubling 按倍增周期取 b_e（仅 dmb）
    - mu_list: 直接指定的 μ 扫描列表
    - latency_list: 延迟扫描列表（毫秒）
    - per_node_b: 无通信基线每节点批大小
    - trials: 试验次数
    - seed: 随机种子
    - out: CSV 输出路径
    - workers: 并发试验数
    """
    command: str = "serial"
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    rule: RuleSpec = field(default_factory=RuleSpec)
    net: NetworkSpec = field(default_factory=NetworkSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    m: int = 10000
    b: int = 1
    b_list: List[int] = field(default_factory=list)
    batch_mode: str = "fixed"
    mu_list: List[int] = field(default_factory=list)
    latency_list: List[float] = field(default_factory=list)
    per_node_b: int = 1
    trials: int = 10
    seed: int = 0
    out: Optional[str] = None
    workers: int = 4

    _SECTIONS = ("problem", "rule", "net", "analysis")

    # ---------- 序列化 ----------

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        try:
            sections = {
                "problem": ProblemSpec(**data.get("problem", {})),
                "rule": RuleSpec(**data.get("rule", {})),
                "net": NetworkSpec(**data.get("net", {})),
                "analysis": AnalysisSpec(**data.get("analysis", {})),
            }
            top = {key: value for key, value in data.items() if key not in sections}
            return cls(**sections, **top)
        except TypeError as e:
            raise ConfigError(f"配置字段不匹配: {e}") from e

    # ---------- 覆盖 ----------

    def apply_overrides(self, overrides: Dict[str, str]) -> "ExperimentConfig":
        """
        按 section.key=value 覆盖字段

        Raises:
            ConfigError: 未知键或值无法转换
        """
        for key, raw in overrides.items():
            section, _, name = key.rpartition(".")
            if section in self._SECTIONS:
                target = getattr(self, section)
            elif section in ("", "run"):
                target = self
            else:
                raise ConfigError(f"未知配置分区: {key}")
            hints = get_type_hints(type(target))
            if name not in hints or name.startswith("_") or name in self._SECTIONS:
                raise ConfigError(f"未知配置键: {key}")
            try:
                setattr(target, name, _coerce(hints[name], raw))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"配置键 {key} 的值 {raw!r} 无法解析: {e}") from e
        return self

    # ---------- 校验 ----------

    def batch_sizes(self) -> List[int]:
        return list(self.b_list) if self.b_list else [self.b]

    def validate(self) -> "ExperimentConfig":
        """
        运行前校验

        Raises:
            ConfigError: 任一约束不满足
        """
        if self.command not in RUN_COMMANDS + ANALYSIS_COMMANDS:
            raise ConfigError(f"未知命令: {self.command}")
        if self.m < 1 or self.trials < 1 or self.workers < 1:
            raise ConfigError(f"m、trials、workers 必须 ≥ 1: m={self.m}, trials={self.trials}")
        if any(b < 1 for b in self.batch_sizes()) or self.per_node_b < 1:
            raise ConfigError("批大小必须 ≥ 1")
        if self.batch_mode not in ("fixed", "doubling"):
            raise ConfigError(f"未知批大小方式: {self.batch_mode}")
        doubling = self.batch_mode == "doubling"
        if doubling and (self.command != "dmb" or self.b_list):
            raise ConfigError("倍增模式只用于 dmb 命令，且不能与 b_list 同时使用")

        problem = self.problem
        if problem.kind not in ("quadratic", "logistic"):
            raise ConfigError(f"未知问题类型: {problem.kind}")
        if problem.n < 1 or problem.sigma_z < 0 or not problem.diameter > 0:
            raise ConfigError("problem.n ≥ 1、sigma_z ≥ 0、diameter > 0")
        if problem.kind == "logistic":
            if not 0 < problem.sparsity <= problem.n:
                raise ConfigError(f"稀疏度必须满足 0 < sparsity ≤ n: {problem.sparsity}")
            if not 0.0 <= problem.density <= 1.0 or not 0.0 <= problem.label_noise <= 0.5:
                raise ConfigError("density 必须在 [0,1]，label_noise 必须在 [0,0.5]")

        rule = self.rule
        if rule.kind not in ("pgd", "da", "md", "cda"):
            raise ConfigError(f"未知更新规则: {rule.kind}")
        if rule.schedule not in ("sqrt", "constant"):
            raise ConfigError(f"未知步长类型: {rule.schedule}")
        if rule.feasible_set not in ("unconstrained", "ball"):
            raise ConfigError(f"未知可行域: {rule.feasible_set}")
        if rule.lam < 0 or not rule.radius > 0:
            raise ConfigError("rule.lam ≥ 0、radius > 0")
        if rule.kind == "cda" and rule.feasible_set != "unconstrained":
            raise ConfigError("ℓ1 复合对偶平均只支持无约束可行域")

        net = self.net
        if net.k < 1 or net.latency < 0 or not net.rate > 0:
            raise ConfigError("net.k ≥ 1、latency ≥ 0、rate > 0")
        if net.topology not in ("star", "path", "tree", "complete", "file"):
            raise ConfigError(f"未知拓扑: {net.topology}")
        if net.topology == "file" and not net.path:
            raise ConfigError("file 拓扑需要 net.path")
        if net.mu is not None and net.mu < 0 or any(mu < 0 for mu in self.mu_list):
            raise ConfigError("μ 不能为负")
        if self.command == "sweep-latency" and net.mu is not None and self.latency_list:
            raise ConfigError("sweep-latency 同时给出了 μ 与 latency_list：固定 μ 会覆盖延迟，请改用 mu_list")
        if self.command in NETWORK_COMMANDS and net.topology != "file" and not doubling:
            for b in self.batch_sizes():
                if b % net.k != 0:
                    raise ConfigError(f"批大小 b={b} 必须是节点数 k={net.k} 的倍数")
        if self.command == "interlaced":
            for mu in ([net.mu] if net.mu is not None else []) + list(self.mu_list):
                if any(mu % b != 0 for b in self.batch_sizes()):
                    raise ConfigError(f"交错实例要求 b 整除 μ: μ={mu}, b={self.batch_sizes()}")

        if (self.command == "speedup" or doubling) and not 0.0 < self.analysis.rho < 0.5:
            raise ConfigError(f"ρ 必须在 (0, 1/2) 内: {self.analysis.rho}")
        if any(not eps > 0 for eps in self.analysis.eps_list):
            raise ConfigError("ε 必须为正")
        if self.analysis.modulus is not None and not self.analysis.modulus > 0:
            raise ConfigError(f"强凸参数必须为正: {self.analysis.modulus}")
        return self

    def output_path(self, base_dir: Optional[Path] = None) -> Path:
        """未指定 out 时为 <输出目录>/<命令>-seed<种子>.csv"""
        if self.out:
            return Path(self.out)
        return Path(base_dir or default_output_dir()) / f"{self.command}-seed{self.seed}.csv"


def _coerce(hint, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    if get_origin(hint) is Union:
        if raw.strip().lower() in ("", "none", "null"):
            return None
        hint = next(arg for arg in get_args(hint) if arg is not type(None))
    if get_origin(hint) in (list, List):
        item = get_args(hint)[0]
        return [_coerce(item, part.strip()) for part in raw.split(",") if part.strip()]
    if hint is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"不是布尔值: {raw}")
    if hint is int:
        return int(raw, 0)
    return hint(raw.strip())


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


def read_config_file(path: Path) -> Dict[str, str]:
    """
    读取 key=value 配置文件

    Raises:
        ConfigError: 行格式错误
        OSError: 文件无法读取
    """
    entries: Dict[str, str] = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number} 缺少 '='")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    logger.debug(f"读取配置文件 {path}: {len(entries)} 项")
    return entries


def build_config(command: str, config_file: Optional[Path] = None,
                 overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """默认值 < 配置文件 < 命令行"""
    config = ExperimentConfig(command=command)
    if config_file is not None:
        config.apply_overrides(read_config_file(config_file))
    if overrides:
        config.apply_overrides(overrides)
    return config.validate()
