"""
核心模型模块

包含数学对象、更新规则、串行与分布式引擎、网络模拟、随机优化和界计算。
"""

from .core import FeasibleSet, InputStream, Problem, Rng, logistic_stream, quadratic_problem
from .dmb import run_dmb, run_dmb_doubling, run_interlaced, run_no_comm
from .errors import (ConfigError, DMBSimError, InputError, RunError, ScheduleError, SolverError,
                     TopologyError, UnsupportedError)
from .minibatch import RegretLedger, RunResult, run_minibatch, run_serial
from .network import Topology, build_tree, compute_mu, vector_sum
from .stochastic_opt import run_dmb_opt
from .update_rules import RuleKind, Schedule, build_rule

__all__ = [
    "FeasibleSet", "InputStream", "Problem", "Rng", "logistic_stream", "quadratic_problem",
    "run_dmb", "run_dmb_doubling", "run_interlaced", "run_no_comm",
    "ConfigError", "DMBSimError", "InputError", "RunError", "ScheduleError", "SolverError",
    "TopologyError", "UnsupportedError",
    "RegretLedger", "RunResult", "run_minibatch", "run_serial",
    "Topology", "build_tree", "compute_mu", "vector_sum",
    "run_dmb_opt",
    "RuleKind", "Schedule", "build_rule",
]
