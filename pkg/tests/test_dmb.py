import math

import numpy as np
import pytest

from dmb_sim.models.analysis import BoundParams, doubling_schedule, psi_dmb
from dmb_sim.models.core import Rng, quadratic_problem
from dmb_sim.models.dmb import (BatchSchedule, interlaced_instance_count, node_partial_sums, run_dmb,
                                run_dmb_doubling, run_interlaced, run_no_comm)
from dmb_sim.models.errors import ConfigError
from dmb_sim.models.minibatch import run_minibatch, run_serial
from dmb_sim.models.network import Topology
from dmb_sim.models.update_rules import Schedule


def _paired_stderr(differences) -> float:
    return float(np.std(differences, ddof=1) / math.sqrt(len(differences)))


def test_batch_schedule_requires_multiple_of_nodes() -> None:
    with pytest.raises(ConfigError):
        BatchSchedule(6, 0, 4)
    with pytest.raises(ConfigError):
        BatchSchedule(8, -1, 4)
    assert BatchSchedule.aligned(8, 5, 4).latency_gap == 8


def test_latency_gap_not_multiple_of_nodes_is_logged(log_messages) -> None:
    BatchSchedule(8, 8, 4)
    assert not any("不是 k=4 的倍数" in message for message in log_messages)
    BatchSchedule(8, 5, 4)
    assert any("μ=5 不是 k=4 的倍数" in message for message in log_messages)


def test_node_partial_sums_follow_arrival_order() -> None:
    gradients = np.arange(6.0).reshape(6, 1)
    sums = node_partial_sums(gradients, 4, 3)
    # 到达序号 4..9 依次分给节点 1, 2, 0, 1, 2, 0
    np.testing.assert_array_equal(np.concatenate(sums), [2.0 + 5.0, 0.0 + 3.0, 1.0 + 4.0])


@pytest.mark.parametrize("seed", range(10))
def test_single_node_without_latency_is_minibatch(seed, unit_quadratic, da_rule, sqrt_schedule) -> None:
    dmb = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 1000, Topology.star(1), 8, Rng(seed), mu=0)
    mini = run_minibatch(da_rule, sqrt_schedule(8), unit_quadratic, 1000, 8, Rng(seed))
    assert dmb.ledger.total_loss == mini.ledger.total_loss
    assert dmb.ledger.regret == mini.ledger.regret
    assert len(dmb.trajectory) == len(mini.trajectory)
    for a, b in zip(dmb.trajectory, mini.trajectory):
        np.testing.assert_array_equal(a, b)


def test_b_not_multiple_of_k_is_config_error(unit_quadratic, da_rule, sqrt_schedule) -> None:
    with pytest.raises(ConfigError):
        run_dmb(da_rule, sqrt_schedule(6), unit_quadratic, 100, Topology.star(4), 6, Rng(0), mu=0)


def test_node_counters_and_messages(unit_quadratic, da_rule, sqrt_schedule) -> None:
    result = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 100, Topology.star(4), 8, Rng(0), mu=4)
    trace = result.trace["dmb"]
    assert len(trace.cycles) == 8
    assert result.updates == 8
    assert result.ledger.count == 100
    np.testing.assert_array_equal(trace.node_inputs, [25, 25, 25, 25])
    np.testing.assert_array_equal(trace.node_gradients, [16, 16, 16, 16])
    assert all(cycle.messages == 6 for cycle in trace.cycles)
    assert all(cycle.discarded_inputs == 4 for cycle in trace.cycles)
    assert trace.synchronized


@pytest.mark.parametrize("m, updates", [(1000, 10), (105, 1), (99, 0)])
def test_incomplete_cycle_predicts_without_update(m, updates, unit_quadratic, da_rule, sqrt_schedule) -> None:
    result = run_dmb(da_rule, sqrt_schedule(10), unit_quadratic, m, Topology.star(2), 10, Rng(1), mu=90)
    assert result.updates == updates
    assert result.ledger.count == m


def test_mu_defaults_to_network_estimate(unit_quadratic, da_rule, sqrt_schedule) -> None:
    topology = Topology.dary_tree(8, 2, latency=0.5, rate=4.0)
    result = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 200, topology, 8, Rng(0))
    assert result.trace["dmb"].latency_gap == 12
    assert result.trace["dmb"].tree_depth == 3


def test_noiseless_multi_node_matches_minibatch(da_rule) -> None:
    problem = quadratic_problem(2, 0.0)
    schedule = Schedule.sqrt(1.0, 0.5)
    dmb = run_dmb(da_rule, schedule, problem, 400, Topology.path(4), 8, Rng(0), mu=0)
    mini = run_minibatch(da_rule, schedule, problem, 400, 8, Rng(0))
    np.testing.assert_allclose(np.array(dmb.trajectory), np.array(mini.trajectory), rtol=1e-12, atol=1e-15)
    assert dmb.ledger.total_loss == pytest.approx(mini.ledger.total_loss, rel=1e-12)


@pytest.mark.parametrize("k, mu", [(1, 0), (2, 2)])
def test_doubling_restarts_each_epoch(k, mu, unit_quadratic, da_rule, sqrt_schedule) -> None:
    m = 1000
    result = run_dmb_doubling(da_rule, sqrt_schedule, unit_quadratic, m, Topology.star(k), Rng(3), mu=mu)
    schedule = doubling_schedule(m, nodes=k)
    epochs = result.trace["epochs"]
    assert [(record.epoch, record.start, record.batch_size) for record in epochs] == [
        (epoch, start, b_e) for epoch, start, _, b_e in schedule]
    assert [record.updates for record in epochs] == [
        min(length, m - start) // (b_e + mu) for _, start, length, b_e in schedule]
    assert sum(record.length for record in epochs) == m
    assert result.ledger.count == m
    assert len(result.trajectory) == 1 + sum(record.updates for record in epochs)
    assert result.trace["dmb"].node_inputs.sum() == m


def test_doubling_first_epochs_match_fresh_runs(unit_quadratic, da_rule, sqrt_schedule) -> None:
    # 第 0 个周期只有一个输入：预测后更新一次，第 1 个周期从初始点重新开始
    result = run_dmb_doubling(da_rule, sqrt_schedule, unit_quadratic, 3, Topology.star(1), Rng(6), mu=0)
    assert [record.updates for record in result.trace["epochs"]] == [1, 2]
    np.testing.assert_array_equal(result.trajectory[0], np.zeros(2))
    single = run_minibatch(da_rule, sqrt_schedule(1), unit_quadratic, 1, 1, Rng(6))
    np.testing.assert_array_equal(result.trajectory[1], single.trajectory[1])


def test_reduction_order_does_not_change_trajectory(unit_quadratic, da_rule, sqrt_schedule) -> None:
    star = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 2000, Topology.star(4), 8, Rng(5), mu=4)
    path = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 2000, Topology.path(4), 8, Rng(5), mu=4)
    assert star.trace["dmb"].tree_depth == 1
    assert path.trace["dmb"].tree_depth == 3
    assert len(star.trajectory) == len(path.trajectory) == 167
    for a, b in zip(star.trajectory, path.trajectory):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
    assert star.ledger.regret == pytest.approx(path.ledger.regret, abs=1e-8)


def test_root_broadcast_matches_independent_updates(unit_quadratic, da_rule, sqrt_schedule) -> None:
    topology = Topology.dary_tree(6, 2)
    local = run_dmb(da_rule, sqrt_schedule(12), unit_quadratic, 600, topology, 12, Rng(4), mu=6)
    broadcast = run_dmb(da_rule, sqrt_schedule(12), unit_quadratic, 600, topology, 12, Rng(4), mu=6,
                        root_broadcast=True)
    assert local.ledger.total_loss == broadcast.ledger.total_loss
    np.testing.assert_array_equal(local.predictor, broadcast.predictor)


def test_dmb_mean_regret_within_bound(unit_quadratic, da_rule, sqrt_schedule) -> None:
    m, b, mu = 8000, 16, 4
    regrets = [run_dmb(da_rule, sqrt_schedule(b), unit_quadratic, m, Topology.star(4), b,
                       Rng(2).child("trial", t), mu=mu).ledger.regret
               for t in range(10)]
    params = BoundParams(sigma2=1.0, horizon=m, diameter=1.0, smoothness=1.0, batch_size=b, latency_gap=mu)
    assert np.mean(regrets) <= psi_dmb(params).general


def test_single_node_no_comm_is_serial(unit_quadratic, da_rule, sqrt_schedule) -> None:
    for seed in range(5):
        nocomm = run_no_comm(da_rule, sqrt_schedule(1), unit_quadratic, 700, 1, 1, Rng(seed))
        serial = run_serial(da_rule, sqrt_schedule(1), unit_quadratic, 700, Rng(seed))
        assert nocomm.ledger.total_loss == serial.ledger.total_loss
        assert nocomm.ledger.regret == serial.ledger.regret
        for a, b in zip(nocomm.trajectory, serial.trajectory):
            np.testing.assert_array_equal(a, b)


def test_no_comm_round_robin_assignment(unit_quadratic, da_rule, sqrt_schedule) -> None:
    result = run_no_comm(da_rule, sqrt_schedule(1), unit_quadratic, 10, 3, 1, Rng(0))
    assert [ledger.count for ledger in result.trace["node_ledgers"]] == [4, 3, 3]
    assert result.ledger.count == 10
    assert sum(ledger.total_loss for ledger in result.trace["node_ledgers"]) == pytest.approx(
        result.ledger.total_loss)


def test_noiseless_no_comm_regret_is_k_times_serial(da_rule) -> None:
    problem = quadratic_problem(2, 0.0)
    schedule = Schedule.sqrt(1.0, 1.0)
    nocomm = run_no_comm(da_rule, schedule, problem, 400, 2, 1, Rng(0))
    serial = run_serial(da_rule, schedule, problem, 200, Rng(1))
    assert serial.ledger.regret > 0
    assert nocomm.ledger.regret == 2.0 * serial.ledger.regret


def test_no_comm_minibatched_nodes(unit_quadratic, da_rule, sqrt_schedule) -> None:
    result = run_no_comm(da_rule, sqrt_schedule(4), unit_quadratic, 100, 5, 4, Rng(0))
    assert [state.step for state in result.trace["node_states"]] == [5] * 5


def test_dmb_beats_no_comm_on_paired_streams(unit_quadratic, da_rule, sqrt_schedule) -> None:
    m, k = 8000, 8
    differences = []
    for t in range(10):
        rng = Rng(3).child("trial", t)
        dmb = run_dmb(da_rule, sqrt_schedule(32), unit_quadratic, m, Topology.star(k), 32, rng, mu=8)
        nocomm = run_no_comm(da_rule, sqrt_schedule(1), unit_quadratic, m, k, 1, rng)
        differences.append(nocomm.ledger.regret - dmb.ledger.regret)
    assert np.mean(differences) > 2 * _paired_stderr(differences)


def test_regret_grows_with_latency(unit_quadratic, da_rule, sqrt_schedule) -> None:
    m, b = 8000, 32
    regrets = {mu: [] for mu in (0, 128, 1024)}
    for t in range(10):
        rng = Rng(5).child("trial", t)
        for mu in regrets:
            regrets[mu].append(run_dmb(da_rule, sqrt_schedule(b), unit_quadratic, m, Topology.star(4), b,
                                       rng, mu=mu).ledger.regret)
    for low, high in ((0, 128), (128, 1024)):
        differences = np.array(regrets[high]) - np.array(regrets[low])
        assert np.mean(differences) >= -_paired_stderr(differences)


def test_interlaced_instance_count() -> None:
    assert interlaced_instance_count(8, 0) == 1
    assert interlaced_instance_count(8, 16) == 3
    with pytest.raises(ConfigError):
        interlaced_instance_count(8, 12)


@pytest.mark.parametrize("seed", range(5))
def test_interlaced_without_latency_is_dmb(seed, unit_quadratic, da_rule, sqrt_schedule) -> None:
    topology = Topology.star(4)
    interlaced = run_interlaced(da_rule, sqrt_schedule(8), unit_quadratic, 1003, topology, 8, Rng(seed), mu=0)
    dmb = run_dmb(da_rule, sqrt_schedule(8), unit_quadratic, 1003, topology, 8, Rng(seed), mu=0)
    assert interlaced.trace["instances"] == 1
    assert interlaced.ledger.total_loss == dmb.ledger.total_loss
    assert len(interlaced.trajectory) == len(dmb.trajectory)
    for a, b in zip(interlaced.trajectory, dmb.trajectory):
        np.testing.assert_array_equal(a, b)


def test_interlaced_prediction_obeys_jensen(unit_quadratic, da_rule, sqrt_schedule) -> None:
    result = run_interlaced(da_rule, sqrt_schedule(4), unit_quadratic, 2000, Topology.star(2), 4, Rng(6),
                            mu=8, track_jensen=True)
    served, instance_mean = result.trace["jensen"]
    assert result.trace["instances"] == 3
    assert result.trace["synchronized"]
    assert served.shape == instance_mean.shape == (2000,)
    assert np.all(served <= instance_mean + 1e-12)


def test_interlaced_rejects_non_dividing_latency(unit_quadratic, da_rule, sqrt_schedule) -> None:
    with pytest.raises(ConfigError):
        run_interlaced(da_rule, sqrt_schedule(8), unit_quadratic, 100, Topology.star(2), 8, Rng(0), mu=12)
