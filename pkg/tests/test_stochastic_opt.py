import numpy as np
import pytest

from dmb_sim.models.analysis import BoundParams, gap_bound
from dmb_sim.models.core import Rng, logistic_stream, quadratic_problem
from dmb_sim.models.errors import ConfigError, RunError, UnsupportedError
from dmb_sim.models.minibatch import run_minibatch, run_serial
from dmb_sim.models.network import Topology
from dmb_sim.models.stochastic_opt import (GapRegretSummary, gap_vs_regret_check, monte_carlo_gap,
                                           optimality_gap, run_dmb_opt, summarize_gap_vs_regret)
from dmb_sim.models.update_rules import DualAveragingRule, ProjectedGradientRule, Schedule


@pytest.mark.parametrize("seed", range(5))
def test_single_node_iterates_follow_minibatch(seed, unit_quadratic, da_rule, sqrt_schedule) -> None:
    opt = run_dmb_opt(da_rule, sqrt_schedule(8), unit_quadratic, 800, Topology.star(1), 8, Rng(seed))
    mini = run_minibatch(da_rule, sqrt_schedule(8), unit_quadratic, 800, 8, Rng(seed))
    assert opt.batches == 100
    assert len(opt.iterates) == 100
    for a, b in zip(opt.iterates, mini.trajectory[:100]):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(opt.average, np.mean(np.array(mini.trajectory[:100]), axis=0), rtol=1e-12)


def test_samples_consumed_drop_the_remainder(unit_quadratic, da_rule, sqrt_schedule) -> None:
    opt = run_dmb_opt(da_rule, sqrt_schedule(8), unit_quadratic, 100, Topology.star(2), 8, Rng(0))
    assert opt.batches == 12
    assert opt.samples_consumed == 96
    assert opt.gap == pytest.approx(optimality_gap(unit_quadratic, opt.average))


def test_batch_larger_than_sample_count(unit_quadratic, da_rule, sqrt_schedule) -> None:
    with pytest.raises(RunError):
        run_dmb_opt(da_rule, sqrt_schedule(64), unit_quadratic, 10, Topology.star(1), 64, Rng(0))


def test_opt_requires_multiple_of_nodes(unit_quadratic, da_rule, sqrt_schedule) -> None:
    with pytest.raises(ConfigError):
        run_dmb_opt(da_rule, sqrt_schedule(6), unit_quadratic, 100, Topology.star(4), 6, Rng(0))


def test_noiseless_opt_iterates_approach_minimizer() -> None:
    problem = quadratic_problem(3, 0.0)
    opt = run_dmb_opt(ProjectedGradientRule(), Schedule.sqrt(1.0, 0.5), problem, 800, Topology.star(4), 8, Rng(2))
    distances = [float(np.linalg.norm(w - problem.minimizer)) for w in opt.iterates + [opt.state.point]]
    assert len(distances) == 101
    assert all(later <= earlier + 1e-15 for earlier, later in zip(distances, distances[1:]))
    assert distances[-1] < distances[0]


def test_quadratic_gap_is_half_squared_distance(unit_quadratic) -> None:
    w = unit_quadratic.minimizer + np.array([0.3, -0.4])
    assert optimality_gap(unit_quadratic, w) == pytest.approx(0.125)
    assert optimality_gap(unit_quadratic, unit_quadratic.minimizer) == 0.0


def test_gap_without_closed_form_is_unsupported() -> None:
    problem = logistic_stream(Rng(0), 10, 2, 0.3, 0.05, variance_samples=500)
    with pytest.raises(UnsupportedError):
        optimality_gap(problem, np.zeros(10))


def test_monte_carlo_gap_agrees_with_closed_form(unit_quadratic) -> None:
    w = unit_quadratic.minimizer + np.array([0.5, 0.2])
    mean, stderr = monte_carlo_gap(unit_quadratic, w, unit_quadratic.minimizer, 50_000, Rng(1))
    assert stderr > 0
    assert abs(mean - optimality_gap(unit_quadratic, w)) <= 4 * stderr


def test_opt_mean_gap_within_bound(unit_quadratic, da_rule, sqrt_schedule) -> None:
    m, b, k = 10_000, 16, 4
    gaps = [run_dmb_opt(da_rule, sqrt_schedule(b), unit_quadratic, m, Topology.star(k), b,
                        Rng(7).child("trial", t)).gap
            for t in range(10)]
    params = BoundParams(sigma2=1.0, horizon=m, diameter=1.0, smoothness=1.0, batch_size=b)
    assert np.mean(gaps) <= gap_bound(params)


def test_online_to_batch_conversion(unit_quadratic, da_rule, sqrt_schedule) -> None:
    pairs = []
    for t in range(15):
        result = run_serial(da_rule, sqrt_schedule(1), unit_quadratic, 3000, Rng(8).child("trial", t))
        pairs.append(gap_vs_regret_check(result.ledger, unit_quadratic))
    summary = summarize_gap_vs_regret(pairs)
    assert summary.trials == 15
    assert summary.holds


def test_gap_vs_regret_needs_regret() -> None:
    problem = logistic_stream(Rng(0), 10, 2, 0.3, 0.05, variance_samples=500)
    result = run_serial(DualAveragingRule(), Schedule.sqrt(1.0, 1.0), problem, 20, Rng(0))
    with pytest.raises(UnsupportedError):
        gap_vs_regret_check(result.ledger, problem)


def test_summary_tolerance() -> None:
    assert GapRegretSummary(1.1, 1.0, 0.1, 10).holds
    assert not GapRegretSummary(1.3, 1.0, 0.1, 10).holds
