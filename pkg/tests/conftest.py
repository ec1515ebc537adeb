import math
from typing import Callable, List

import numpy as np
import pytest
from loguru import logger

from dmb_sim.models.core import Problem, quadratic_problem
from dmb_sim.models.update_rules import DualAveragingRule, Schedule


@pytest.fixture
def unit_quadratic() -> Problem:
    """n = 2，σ² = 1，D = L = 1"""
    return quadratic_problem(2, math.sqrt(0.5))


@pytest.fixture
def da_rule() -> DualAveragingRule:
    return DualAveragingRule()


@pytest.fixture
def sqrt_schedule(unit_quadratic) -> Callable[[int], Schedule]:
    def _build(b: int = 1) -> Schedule:
        return Schedule.sqrt_for(unit_quadratic.smoothness, unit_quadratic.sigma, unit_quadratic.diameter, b)
    return _build


@pytest.fixture
def numeric_gradient() -> Callable:
    """中心差分梯度"""
    def _gradient(f: Callable[[np.ndarray], float], w: np.ndarray, step: float = 1e-6) -> np.ndarray:
        grad = np.zeros_like(w)
        for index in range(w.shape[0]):
            offset = np.zeros_like(w)
            offset[index] = step
            grad[index] = (f(w + offset) - f(w - offset)) / (2 * step)
        return grad
    return _gradient


@pytest.fixture
def log_messages() -> List[str]:
    """收集 DEBUG 及以上的 loguru 消息"""
    messages: List[str] = []
    handler_id = logger.add(lambda message: messages.append(message.record["message"]), level="DEBUG")
    yield messages
    logger.remove(handler_id)
