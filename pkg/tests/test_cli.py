"""Command line interface: outputs, manifests and exit codes"""
import json

import pandas as pd
import pytest
from click.testing import CliRunner

from emr_closure import cli as cli_module
from emr_closure.cli import cli
from emr_closure.core.manifest import read_manifest
from emr_closure.core.timeseries import save_csv


@pytest.fixture
def runner(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("EMR_CLOSURE_CONFIG", raising=False)
    monkeypatch.delenv("EMR_CLOSURE_LOG_LEVEL", raising=False)
    return CliRunner()


@pytest.fixture
def data_csv(tmp_path, ou_ts):
    return str(save_csv(ou_ts, tmp_path / "data.csv"))


@pytest.fixture
def model_file(runner, tmp_path, data_csv):
    path = tmp_path / "fit" / "model.yaml"
    result = runner.invoke(cli, ["fit", data_csv, "--levels", "1", "-o", str(path)])
    assert result.exit_code == 0, result.output
    return str(path)


def test_simulate_reference_preset(runner, tmp_path):
    out = tmp_path / "linear"
    result = runner.invoke(cli, ["simulate-reference", "--preset", "paper-linear", "--param", "run.steps=100",
                                 "--seed", "3", "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert len(pd.read_csv(out / "trajectory.csv")) == 100
    manifest = read_manifest(out)
    assert manifest["status"] == "ok"
    assert manifest["seeds"] == [3]
    assert manifest["config"]["preset"]["run"]["steps"] == 100


def test_simulate_reference_needs_one_source(runner, tmp_path):
    out = tmp_path / "none"
    result = runner.invoke(cli, ["simulate-reference", "-o", str(out)])
    assert result.exit_code == 2
    assert read_manifest(out)["status"] == "failed: ConfigError"


def test_eps_only_for_climate(runner, tmp_path):
    result = runner.invoke(cli, ["simulate-reference", "--preset", "paper-linear", "--eps", "0.5",
                                 "-o", str(tmp_path / "x")])
    assert result.exit_code == 2


def test_bad_override_exits_with_config_code(runner, tmp_path, data_csv):
    result = runner.invoke(cli, ["--set", "fit.constraints=box", "fit", data_csv, "-o", str(tmp_path / "m.yaml")])
    assert result.exit_code == 2


def test_fit_writes_model_and_manifest(runner, tmp_path, model_file):
    manifest = read_manifest(tmp_path / "fit")
    assert manifest["command"] == "fit"
    assert manifest["arguments"]["levels"] == 1
    assert "skip" not in manifest["arguments"]
    assert manifest["arguments"]["samples"] == 2700
    assert manifest["outputs"] == [model_file]
    assert manifest["inputs"][0].endswith("data.csv")


def test_fit_missing_data(runner, tmp_path):
    result = runner.invoke(cli, ["fit", str(tmp_path / "absent.csv"), "-o", str(tmp_path / "m" / "model.yaml")])
    assert result.exit_code == 2
    assert read_manifest(tmp_path / "m")["status"] == "failed: DataError"


def test_simulate_model(runner, tmp_path, model_file, data_csv):
    out = tmp_path / "sim"
    result = runner.invoke(cli, ["simulate-model", model_file, "--steps", "50", "--seed", "2", "--data", data_csv,
                                 "-o", str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "simulated.csv")
    assert list(frame.columns) == ["u", "v"]
    assert len(frame) == 51
    assert read_manifest(out)["seeds"] == [2]


def test_forecast(runner, tmp_path, model_file, data_csv):
    out = tmp_path / "fc"
    result = runner.invoke(cli, ["forecast", model_file, data_csv, "--horizon", "5", "--ensemble", "3",
                                 "--window", "200", "-o", str(out)])
    assert result.exit_code == 0, result.output
    summary = pd.read_csv(out / "summary.csv")
    assert len(summary) == 5
    assert (out / "member_002.csv").exists()


def test_diagnose_pair(runner, tmp_path, data_csv, ou_ts):
    other = str(save_csv(ou_ts.slice(100), tmp_path / "other.csv"))
    out = tmp_path / "diag"
    result = runner.invoke(cli, ["diagnose", data_csv, other, "--acf", "10", "--bins", "20", "--pdf2d", "0", "1",
                                 "-o", str(out)])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_lag"] == 10
    assert len(summary["pdf_l1"]) == 2
    assert set(summary["variance"]) == {"data", "other"}
    assert (out / "acf_u.gp").exists() and (out / "pdf2d_other.gp").exists()


def test_eta_test(runner, tmp_path, model_file, data_csv):
    out = tmp_path / "eta"
    result = runner.invoke(cli, ["eta-test", model_file, data_csv, "--seeds", "2", "--spin-up", "10",
                                 "-o", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "eta.json").read_text())
    assert report["n_seeds"] == 2
    assert report["mode"] == "reconstructed"
    assert read_manifest(out)["seeds"] == [0, 1]


def test_eta_test_without_hidden_levels(runner, tmp_path, data_csv):
    model = tmp_path / "flat" / "model.yaml"
    assert runner.invoke(cli, ["fit", data_csv, "--levels", "0", "-o", str(model)]).exit_code == 0
    result = runner.invoke(cli, ["eta-test", str(model), data_csv, "-o", str(tmp_path / "eta0")])
    assert result.exit_code == 3
    assert read_manifest(tmp_path / "eta0")["status"] == "failed: ModelError"


def whiteness_study(threshold):
    return {
        "name": "linear-toy",
        "stages": {"check": {"tasks": [{"id": "whiteness", "action": "whiteness_check",
                                        "params": {"samples": 20_000, "channels": 2, "seed": 5}}]}},
        "gates": [{"name": "stops", "metric": "whiteness.passed", "comparison": "==", "threshold": threshold}],
    }


def test_reproduce_passing_gates(runner, tmp_path, monkeypatch):
    monkeypatch.setattr(cli_module, "load_study", lambda name: whiteness_study(1))
    out = tmp_path / "study"
    result = runner.invoke(cli, ["reproduce", "linear-toy", "-o", str(out)])
    assert result.exit_code == 0, result.output
    results = json.loads((out / "results.json").read_text())
    assert results["tasks"]["whiteness"]["status"] == "completed"
    assert json.loads((out / "report.json").read_text())["passed"] is True
    assert "**Result:** PASS" in (out / "report.md").read_text()


def test_reproduce_failing_gate_exits_4(runner, tmp_path, monkeypatch):
    monkeypatch.setattr(cli_module, "load_study", lambda name: whiteness_study(2))
    out = tmp_path / "study"
    result = runner.invoke(cli, ["reproduce", "linear-toy", "--sequential", "-o", str(out)])
    assert result.exit_code == 4
    assert read_manifest(out)["status"] == "failed: AcceptanceError"
    assert json.loads((out / "report.json").read_text())["passed"] is False


def test_event_log(runner, tmp_path):
    log = tmp_path / "events.log"
    result = runner.invoke(cli, ["--event-log", str(log), "simulate-reference", "--preset", "gamma-chain",
                                 "--param", "run.duration=0.5", "--param", "run.dt=0.01",
                                 "-o", str(tmp_path / "gc")])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "gc" / "report.json").exists()
    assert log.exists()


def test_fit_keeps_every_row_with_skip_zero(runner, tmp_path, data_csv):
    out = tmp_path / "all" / "model.yaml"
    result = runner.invoke(cli, ["fit", data_csv, "--levels", "1", "--skip", "0", "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert read_manifest(out.parent)["arguments"]["samples"] == 3000
