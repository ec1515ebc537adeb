import math

import numpy as np
import pytest

from dmb_sim.models.core import DiagonalGenerator, EuclideanGenerator, FeasibleSet
from dmb_sim.models.errors import InputError, RunError, ScheduleError
from dmb_sim.models.update_rules import (RuleKind, Schedule, ScheduleKind, UpdateState, build_rule,
                                         composite_da_apply, da_apply, md_apply, pgd_apply, schedule_alpha)

SETS = [
    FeasibleSet.unconstrained(),
    FeasibleSet.ball(0.5),
    FeasibleSet.box([-0.3, -1.0, 0.0], [0.3, 1.0, 0.2]),
]


def _feasible_points(feasible_set: FeasibleSet, rng: np.random.Generator, count: int = 200) -> np.ndarray:
    return np.array([feasible_set.project(rng.normal(size=3) * 2) for _ in range(count)])


def _assert_variational_optimum(w: np.ndarray, grad_at_w: np.ndarray, points: np.ndarray, tol: float) -> None:
    """凸问题的最优性：对可行域内任意 u 有 ⟨∇φ(w), u − w⟩ ≥ 0"""
    assert np.min((points - w) @ grad_at_w) >= -tol


def test_pgd_unconstrained_step() -> None:
    state = UpdateState.initial(np.zeros(2))
    w, state = pgd_apply(state, np.array([2.0, 0.0]), 2.0, FeasibleSet.unconstrained())
    np.testing.assert_array_equal(w, [-1.0, 0.0])
    assert state.step == 1


def test_da_accumulates_gradient_sum() -> None:
    state = UpdateState.initial(np.zeros(2))
    _, state = da_apply(state, np.array([1.0, 0.0]), 1.0, FeasibleSet.unconstrained())
    w, state = da_apply(state, np.array([1.0, 2.0]), 2.0, FeasibleSet.unconstrained())
    np.testing.assert_array_equal(w, [-1.0, -1.0])
    np.testing.assert_array_equal(state.grad_sum, [2.0, 2.0])


def test_md_euclidean_matches_gradient_step() -> None:
    state = UpdateState.initial(np.zeros(2))
    w, _ = md_apply(state, np.array([2.0, 0.0]), 1.0, 1.0, EuclideanGenerator(), FeasibleSet.unconstrained())
    np.testing.assert_allclose(w, [-1.0, 0.0])


@pytest.mark.parametrize("feasible_set", SETS)
def test_pgd_is_argmin(feasible_set) -> None:
    rng = np.random.default_rng(3)
    points = _feasible_points(feasible_set, rng)
    for _ in range(30):
        state = UpdateState.initial(feasible_set.project(rng.normal(size=3)))
        g = rng.normal(size=3) * 3
        alpha = float(rng.uniform(0.5, 4.0))
        w, _ = pgd_apply(state, g, alpha, feasible_set)
        assert feasible_set.contains(w)
        # φ(w) = ⟨g, w⟩ + (α/2)‖w − w_j‖²
        _assert_variational_optimum(w, g + alpha * (w - state.point), points, 1e-10)


@pytest.mark.parametrize("feasible_set", SETS)
def test_da_is_argmin(feasible_set) -> None:
    rng = np.random.default_rng(4)
    points = _feasible_points(feasible_set, rng)
    state = UpdateState.initial(feasible_set.project(np.zeros(3)))
    for j in range(1, 30):
        g = rng.normal(size=3)
        alpha = 1.0 + math.sqrt(j)
        w, state = da_apply(state, g, alpha, feasible_set)
        # φ(w) = ⟨s_j, w⟩ + (α/2)‖w‖²
        _assert_variational_optimum(w, state.grad_sum + alpha * w, points, 1e-10)


@pytest.mark.parametrize("feasible_set", SETS)
def test_md_diagonal_generator_is_argmin(feasible_set) -> None:
    rng = np.random.default_rng(5)
    generator = DiagonalGenerator([1.0, 3.0, 8.0])
    points = _feasible_points(feasible_set, rng, 100)
    for _ in range(10):
        state = UpdateState.initial(feasible_set.project(rng.normal(size=3) * 0.2))
        g = rng.normal(size=3)
        w, _ = md_apply(state, g, 1.0, 1.0, generator, feasible_set)
        assert feasible_set.contains(w, tol=1e-9)
        grad = g + 2.0 * (generator.gradient(w) - generator.gradient(state.point))
        _assert_variational_optimum(w, grad, points, 1e-10)


def test_md_diagonal_generator_on_ball_satisfies_kkt() -> None:
    rng = np.random.default_rng(15)
    weights = np.array([1.0, 3.0, 8.0])
    generator = DiagonalGenerator(weights)
    ball = FeasibleSet.ball(1.0)
    active = 0
    for _ in range(200):
        anchor = ball.project(rng.normal(size=3))
        g = rng.normal(size=3) * 5
        w, _ = md_apply(UpdateState.initial(anchor), g, 1.0, 1.0, generator, ball)
        # ∇φ(w) = g + t·d·(w − a)，在边界上必须等于 −2ν·w 且 ν ≥ 0
        residual = g + 2.0 * weights * (w - anchor)
        free = anchor - g / (2.0 * weights)
        if np.linalg.norm(free) <= 1.0:
            np.testing.assert_allclose(w, free, rtol=0, atol=1e-12)
            continue
        active += 1
        assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-12)
        multiplier = -float(residual @ w) / float(w @ w)
        assert multiplier >= 0
        np.testing.assert_allclose(residual, -multiplier * w, rtol=0, atol=1e-8)
    assert active > 50


def test_md_rule_rejects_step_below_smoothness() -> None:
    rule = build_rule(RuleKind.MD, FeasibleSet.ball(1.0), smoothness=2.0)
    state = rule.initial_state(2)
    with pytest.raises(ScheduleError):
        rule.apply(state, np.ones(2), 1.5)
    w, _ = rule.apply(state, np.ones(2), 2.0)
    np.testing.assert_allclose(w, [-0.5, -0.5])
    assert rule.describe()["smoothness"] == 2.0


def test_md_euclidean_matches_pgd_up_to_rounding() -> None:
    rng = np.random.default_rng(6)
    ball = FeasibleSet.ball(1.0)
    md_state = pgd_state = UpdateState.initial(np.zeros(3))
    for j in range(1, 200):
        g = rng.normal(size=3)
        alpha = 1.0 + 0.7 * math.sqrt(j)
        w_md, md_state = md_apply(md_state, g, alpha - 1.0, 1.0, EuclideanGenerator(), ball)
        w_pgd, pgd_state = pgd_apply(pgd_state, g, alpha, ball)
        np.testing.assert_allclose(w_md, w_pgd, rtol=1e-12, atol=1e-14)


def test_md_rule_is_bitwise_pgd() -> None:
    rng = np.random.default_rng(7)
    md_rule = build_rule(RuleKind.MD, FeasibleSet.ball(1.0), smoothness=1.0)
    pgd_rule = build_rule(RuleKind.PGD, FeasibleSet.ball(1.0))
    md_state, pgd_state = md_rule.initial_state(3), pgd_rule.initial_state(3)
    for j in range(1, 100):
        g = rng.normal(size=3)
        w_md, md_state = md_rule.apply(md_state, g, 1.0 + math.sqrt(j))
        w_pgd, pgd_state = pgd_rule.apply(pgd_state, g, 1.0 + math.sqrt(j))
        np.testing.assert_array_equal(w_md, w_pgd)


def test_md_rejects_zero_total_step() -> None:
    state = UpdateState.initial(np.zeros(2))
    with pytest.raises(ScheduleError):
        md_apply(state, np.ones(2), 0.0, 0.0, EuclideanGenerator(), FeasibleSet.unconstrained())
    with pytest.raises(ScheduleError):
        md_apply(state, np.ones(2), -1.0, 2.0, EuclideanGenerator(), FeasibleSet.unconstrained())


def test_composite_with_zero_lambda_is_dual_averaging() -> None:
    rng = np.random.default_rng(8)
    cda_state = da_state = UpdateState.initial(np.zeros(4))
    for j in range(1, 50):
        g = rng.normal(size=4)
        w_cda, cda_state = composite_da_apply(cda_state, g, 1.0 + math.sqrt(j), 0.0)
        w_da, da_state = da_apply(da_state, g, 1.0 + math.sqrt(j), FeasibleSet.unconstrained())
        np.testing.assert_array_equal(w_cda, w_da)


def test_composite_satisfies_subgradient_optimality() -> None:
    rng = np.random.default_rng(9)
    lam = 0.3
    state = UpdateState.initial(np.zeros(6))
    for j in range(1, 40):
        g = rng.normal(size=6)
        alpha = 1.0 + math.sqrt(j)
        w, state = composite_da_apply(state, g, alpha, lam)
        s = state.grad_sum
        # φ(w) = ⟨s, w⟩ + jλ‖w‖₁ + (α/2)‖w‖²
        active = w != 0
        np.testing.assert_allclose(s[active] + j * lam * np.sign(w[active]) + alpha * w[active], 0.0,
                                   atol=1e-12)
        assert np.all(np.abs(s[~active]) <= j * lam + 1e-12)


def test_composite_threshold_outputs_zero() -> None:
    state = UpdateState.initial(np.zeros(2))
    w, _ = composite_da_apply(state, np.array([0.5, -2.0]), 2.0, 0.5)
    np.testing.assert_array_equal(w, [0.0, 0.75])


def test_non_finite_update_is_a_run_error() -> None:
    state = UpdateState.initial(np.zeros(2))
    with pytest.raises(RunError):
        pgd_apply(state, np.array([math.inf, 0.0]), 1.0, FeasibleSet.unconstrained())


def test_non_positive_alpha_is_rejected() -> None:
    state = UpdateState.initial(np.zeros(2))
    with pytest.raises(ScheduleError):
        da_apply(state, np.ones(2), 0.0, FeasibleSet.unconstrained())


def test_sqrt_schedule_values() -> None:
    schedule = Schedule.sqrt(1.0, 0.5)
    assert schedule.alpha(4) == pytest.approx(2.0)
    assert schedule.beta_at(4) == pytest.approx(1.0)
    assert schedule_alpha(schedule, 1) == pytest.approx(1.5)
    with pytest.raises(InputError):
        schedule_alpha(schedule, 0)


def test_sqrt_for_divides_noise_by_root_batch() -> None:
    schedule = Schedule.sqrt_for(1.0, 2.0, 0.5, batch_size=16)
    assert schedule.gamma == pytest.approx(2.0 / 4.0 / 0.5)
    assert schedule.sigma_eff == pytest.approx(0.5)


def test_constant_schedule() -> None:
    schedule = Schedule.constant_for(1.0, 1.0, 0.5, 10000, batch_size=4)
    assert schedule.kind == ScheduleKind.CONSTANT
    assert schedule.alpha(1) == schedule.alpha(999) == pytest.approx(1.0 + 0.5 * 100.0)


def test_schedule_requires_positive_first_step() -> None:
    with pytest.raises(ScheduleError):
        Schedule.sqrt(0.0, 0.0)
    with pytest.raises(ScheduleError):
        Schedule.sqrt(-1.0, 2.0)


def test_initial_state_is_projected_origin() -> None:
    rule = build_rule(RuleKind.PGD, FeasibleSet.box([0.5, -1.0], [1.0, 1.0]))
    np.testing.assert_array_equal(rule.initial_state(2).point, [0.5, 0.0])


def test_composite_rule_rejects_constraints() -> None:
    with pytest.raises(InputError):
        build_rule(RuleKind.CDA, FeasibleSet.ball(1.0), lam=0.1)
