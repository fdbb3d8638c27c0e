"""Layered configuration: defaults, local YAML, environment and overrides"""
import pytest

from emr_closure.core.config import (AppConfig, FitConfig, StoppingConfig, build_config, deep_merge, load_config,
                                     parse_overrides)
from emr_closure.core.errors import ConfigError


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("EMR_CLOSURE_CONFIG", raising=False)
    monkeypatch.delenv("EMR_CLOSURE_LOG_LEVEL", raising=False)


def test_package_defaults():
    config = load_config()
    assert isinstance(config, AppConfig)
    assert config.fit.ridge == "auto"
    assert config.fit.constraints == "none"
    assert config.fit.stopping == StoppingConfig()
    assert config.eta.mode == "reconstructed"
    assert config.simulate.reflect is None
    assert config.log_level == "INFO"


def test_local_file_is_picked_up(tmp_path):
    (tmp_path / "emr_closure.yaml").write_text("fit:\n  constraints: energy\n  stopping:\n    max_levels: 3\n")
    config = load_config()
    assert config.fit.constraints == "energy"
    assert config.fit.stopping.max_levels == 3
    # untouched siblings keep their defaults
    assert config.fit.stopping.r2_target == 0.5


def test_explicit_path_must_exist(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_environment_layer(tmp_path, monkeypatch):
    custom = tmp_path / "custom.yaml"
    custom.write_text("eta:\n  n_seeds: 4\n")
    monkeypatch.setenv("EMR_CLOSURE_CONFIG", str(custom))
    monkeypatch.setenv("EMR_CLOSURE_LOG_LEVEL", "debug")
    config = load_config()
    assert config.eta.n_seeds == 4
    assert config.log_level == "DEBUG"


def test_overrides_win(tmp_path):
    (tmp_path / "emr_closure.yaml").write_text("fit:\n  ridge: 0.5\n")
    config = load_config(overrides=["fit.ridge=0", "simulate.reflect=1e-3", "eta.mode=simulated"])
    assert config.fit.ridge == 0
    assert config.simulate.reflect == pytest.approx(1e-3)
    assert config.eta.mode == "simulated"


def test_parse_overrides():
    assert parse_overrides(["a.b=1", "a.c=x", "d="]) == {"a": {"b": 1, "c": "x"}, "d": None}
    with pytest.raises(ConfigError):
        parse_overrides(["no-equals"])
    with pytest.raises(ConfigError):
        parse_overrides(["=3"])
    with pytest.raises(ConfigError, match="conflicts"):
        parse_overrides(["a=1", "a.b=2"])


def test_deep_merge_leaves_inputs_alone():
    base = {"fit": {"ridge": "auto", "stopping": {"max_levels": 20}}}
    merged = deep_merge(base, {"fit": {"stopping": {"max_levels": 2}}})
    assert merged["fit"]["stopping"]["max_levels"] == 2
    assert merged["fit"]["ridge"] == "auto"
    assert base["fit"]["stopping"]["max_levels"] == 20


@pytest.mark.parametrize("raw", [
    {"fit": {"constraints": "box"}},
    {"fit": {"ridge": "huge"}},
    {"fit": {"ridge": -1.0}},
    {"fit": {"stopping": {"lag1_tolerance": 0.0}}},
    {"eta": {"mode": "replayed"}},
    {"eta": {"n_seeds": 0}},
    {"diagnostics": {"bins": 10}},
])
def test_invalid_settings(raw):
    with pytest.raises(ConfigError):
        build_config(raw)


def test_snapshot_is_plain_dict():
    snapshot = AppConfig(fit=FitConfig(ridge=0.0)).snapshot()
    assert snapshot["fit"]["ridge"] == 0.0
    assert snapshot["fit"]["stopping"]["max_levels"] == 20
