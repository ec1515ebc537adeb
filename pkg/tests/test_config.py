import pytest

from dmb_sim.models.errors import ConfigError
from dmb_sim.utils.config import (ExperimentConfig, OUTPUT_DIR_ENV, build_config, default_output_dir,
                                  read_config_file)


def test_defaults_are_valid() -> None:
    config = build_config("serial")
    assert config.m == 10000
    assert config.rule.kind == "da"
    assert config.net.mu is None


def test_overrides_are_coerced_by_field_type() -> None:
    config = build_config("sweep-latency", overrides={
        "run.m": "500",
        "b": "8",
        "net.k": "4",
        "net.mu": "none",
        "net.root_broadcast": "yes",
        "latency_list": "0.5, 1, 2",
        "rule.gamma": "0.25",
    })
    assert config.m == 500 and config.b == 8
    assert config.net.k == 4 and config.net.mu is None
    assert config.net.root_broadcast is True
    assert config.latency_list == [0.5, 1.0, 2.0]
    assert config.rule.gamma == 0.25


@pytest.mark.parametrize("key, value", [
    ("problem.colour", "red"),
    ("cluster.k", "4"),
    ("run.problem", "x"),
    ("net.k", "four"),
    ("net.root_broadcast", "maybe"),
])
def test_bad_overrides(key, value) -> None:
    with pytest.raises(ConfigError):
        ExperimentConfig().apply_overrides({key: value})


def test_config_file_then_flags(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("# 实验\nrun.m = 50\nproblem.n = 3   # 维度\n\nrun.trials=2\n", encoding="utf-8")
    config = build_config("serial", path, {"run.m": "40"})
    assert config.m == 40
    assert config.problem.n == 3
    assert config.trials == 2


def test_config_file_line_without_equals(tmp_path) -> None:
    path = tmp_path / "bad.cfg"
    path.write_text("run.m 50\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config_file(path)


@pytest.mark.parametrize("command, overrides", [
    ("dmb", {"net.k": "4", "b": "6"}),
    ("sweep-batch", {"net.k": "4", "b_list": "4,6"}),
    ("interlaced", {"b": "8", "net.mu": "12"}),
    ("serial", {"run.m": "0"}),
    ("serial", {"problem.kind": "poisson"}),
    ("serial", {"rule.kind": "cda", "rule.feasible_set": "ball"}),
    ("dmb", {"net.topology": "file"}),
    ("speedup", {"analysis.rho": "0.5"}),
    ("bounds", {"analysis.eps_list": "0.1,0"}),
    ("bounds", {"analysis.modulus": "0"}),
    ("sweep-latency", {"net.mu": "4", "latency_list": "0.5,1"}),
    ("dmb", {"batch_mode": "geometric"}),
    ("minibatch", {"batch_mode": "doubling"}),
    ("dmb", {"batch_mode": "doubling", "b_list": "4,8"}),
    ("dmb", {"batch_mode": "doubling", "analysis.rho": "0.6"}),
    ("bogus", {}),
])
def test_validation_errors(command, overrides) -> None:
    with pytest.raises(ConfigError):
        build_config(command, overrides=overrides)


def test_nocomm_does_not_require_multiple_of_nodes() -> None:
    assert build_config("nocomm", overrides={"net.k": "4", "b": "6"}).b == 6


def test_doubling_mode_ignores_fixed_batch_divisibility() -> None:
    config = build_config("dmb", overrides={"net.k": "4", "b": "1", "batch_mode": "doubling"})
    assert config.batch_mode == "doubling"


def test_fixed_mu_latency_sweep_without_latency_list_is_valid() -> None:
    config = build_config("sweep-latency", overrides={"net.mu": "4", "net.k": "2", "b": "4"})
    assert config.net.mu == 4 and config.latency_list == []


def test_round_trip_through_dict() -> None:
    config = build_config("dmb", overrides={"net.k": "2", "b": "4", "mu_list": "0,8"})
    again = ExperimentConfig.from_dict(config.to_dict())
    assert again == config


def test_unknown_field_in_dict() -> None:
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"problem": {"dimension": 3}})


def test_output_path(tmp_path, monkeypatch) -> None:
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert default_output_dir() == tmp_path
    config = build_config("dmb", overrides={"seed": "7"})
    assert config.output_path() == tmp_path / "dmb-seed7.csv"
    config.out = str(tmp_path / "x.csv")
    assert config.output_path() == tmp_path / "x.csv"
