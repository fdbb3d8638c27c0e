"""
EMR Closure - Study actions
Handlers dispatched by the study orchestrator. Each takes (task, context) and returns a
dict: plain numbers and lists feed the gates, heavier objects (series, models) are
passed on to dependent tasks and left out of results.json.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from ..core.config import StoppingConfig
from ..core.emr import EMRModel, energy_audit, fit_emr, grand_linear_operator, save_model, stopping_test
from ..core.errors import ConfigError, DataError
from ..core.orchestrator import StudyContext, Task
from ..core.simulate import (ReflectionSpec, SimConfig, eta_test, init_hidden_backward, member_generator,
                             project_positive, simulate_emr)
from ..core.timeseries import (TimeSeries, acf, acf_max_deviation, acf_rms_error, pdf1d, pdf2d,
                               pdf_l1_distance, save_csv)
from .reference.climate import ClimateParams, climate_energy_check, simulate_climate
from .reference.gamma_chain import GammaChainSpec, verify_gamma_chain
from .reference.linear_toy import LinearToyParams, simulate_linear_toy, transformed_linear_model
from .reference.lotka_volterra import CHAOTIC_N0, LVParams, lv_observed, simulate_lv
from .reporting.plots import PlotGenerator

logger = logging.getLogger(__name__)


def _task_dir(task: Task, context: StudyContext) -> Path:
    path = Path(context.out_dir) / task.id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(context: StudyContext, ref: str, default_key: str) -> Any:
    """'task_id' or 'task_id.key' -> the object a previous task produced"""
    task_id, _, key = ref.partition(".")
    result = context.output(task_id)
    key = key or default_key
    if key not in result:
        raise ConfigError(f"Task {task_id!r} produced no {key!r}")
    return result[key]


def _series(context: StudyContext, ref: str) -> TimeSeries:
    return _resolve(context, ref, "series")


def _model(context: StudyContext, ref: str) -> EMRModel:
    return _resolve(context, ref, "model")


def _seed(task: Task, context: StudyContext) -> int:
    return int(task.params.get("seed", context.seed))


def _floats(values) -> List[float]:
    return [float(v) for v in np.ravel(values)]


def generate_climate(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = task.params
    climate = ClimateParams.from_mapping(params.get("model", {}))
    if "eps" in params:
        climate = climate.with_eps(float(params["eps"]))
    full, observed = simulate_climate(
        climate,
        duration=float(params.get("duration", 1e4)),
        dt=float(params.get("dt", 1e-3)),
        sample_dt=float(params.get("sample_dt", 0.05)),
        seed=_seed(task, context),
        scheme=params.get("scheme", "rk4-em"),
    )
    skip = int(round(float(params.get("transient", 0.0)) / full.dt))
    if skip:
        full, observed = full.slice(skip), observed.slice(skip)
    out = _task_dir(task, context)
    save_csv(full, out / "full.csv")
    save_csv(observed, out / "observed.csv")
    ok, residuals = climate_energy_check(climate)
    std = full.data.std(axis=0)
    return {
        "series": observed,
        "full": full,
        "eps": climate.eps,
        "samples": observed.n,
        "energy_identities": ok,
        "std_slow": _floats(std[:2]),
        "std_fast": _floats(std[2:]),
    }


def generate_lv(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = task.params
    lv = LVParams.from_mapping(params.get("model", {}))
    ts = simulate_lv(lv, params.get("N0", CHAOTIC_N0), float(params.get("dt", 0.035)),
                     int(params.get("steps", 150_000)))
    observed = lv_observed(ts, int(params.get("transient", 10_000)), params.get("channels", (0, 1, 2)))
    out = _task_dir(task, context)
    save_csv(ts, out / "full.csv")
    save_csv(observed, out / "observed.csv")
    return {
        "series": observed,
        "full": ts,
        "samples": observed.n,
        "min_value": float(observed.data.min()),
        "max_value": float(observed.data.max()),
    }


def generate_linear_toy(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = task.params
    toy = LinearToyParams.from_mapping(params.get("model", {}))
    ts = simulate_linear_toy(toy, float(params.get("dt", 1e-3)), int(params.get("steps", 1_000_000)),
                             _seed(task, context))
    save_csv(ts, _task_dir(task, context) / "trajectory.csv")
    transformed = transformed_linear_model(toy)
    return {
        "series": ts.select([0]),
        "full": ts,
        "samples": ts.n,
        "true_eigenvalues": _floats(np.sort(np.linalg.eigvals(toy.matrix).real)),
        "similarity_residual": transformed.residual,
    }


def fit(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = task.params
    ts = _series(context, params["source"])
    stopping = StoppingConfig(**params.get("stopping", {}))
    model = fit_emr(
        ts,
        constraints=params.get("constraints", "none"),
        ridge=params.get("ridge", "auto"),
        stopping=stopping,
        n_levels=params.get("n_levels"),
        quadratic=bool(params.get("quadratic", True)),
        source=f"study.{task.id}",
    )
    path = save_model(model, _task_dir(task, context) / "model.yaml")
    return {
        "model": model,
        "p": model.p,
        "stop_reason": model.report.stop_reason,
        "main_r2": list(model.report.main_r2),
        "model_file": str(path),
    }


def simulate_model(task: Task, context: StudyContext) -> Dict[str, Any]:
    """Free run from the start of the training record, hidden levels initialized from data"""
    params = task.params
    model = _model(context, params["model"])
    data = _series(context, params["data"])
    history = init_hidden_backward(model, data)
    x0 = history.x[0]
    reflect = params.get("reflect")
    reflection = ReflectionSpec.at(reflect)
    if reflection.enabled:
        x0 = project_positive(x0, reflection.epsilon)
    steps = int(params.get("steps", data.n - 1))
    ts = simulate_emr(model, x0, history.state_at(0),
                      SimConfig(steps=steps, seed=_seed(task, context)), reflection,
                      source=f"study.{task.id}")
    save_csv(ts, _task_dir(task, context) / "simulated.csv")
    return {
        "series": ts,
        "steps": steps,
        "min_value": float(ts.data.min()),
        "max_value": float(ts.data.max()),
    }


def diagnose(task: Task, context: StudyContext) -> Dict[str, Any]:
    """Paired statistics of a reference and a candidate series plus plot scripts"""
    params = task.params
    reference = _series(context, params["reference"])
    candidate = _series(context, params["candidate"])
    if reference.d != candidate.d:
        raise DataError(f"Cannot compare {reference.d} channels with {candidate.d}")
    if "max_lag_time" in params:
        max_lag = int(round(float(params["max_lag_time"]) / reference.dt))
    else:
        max_lag = int(params.get("max_lag", 200))
    bins = int(params.get("bins", 50))
    ref_acf, cand_acf = acf(reference, max_lag), acf(candidate, max_lag)

    plots = PlotGenerator(_task_dir(task, context))
    for c, name in enumerate(reference.names):
        plots.acf_overlay(f"acf_{name}", {"reference": ref_acf, "candidate": cand_acf}, channel=c)
        plots.pdf_overlay(f"pdf_{name}", {"reference": pdf1d(reference, c, bins),
                                          "candidate": pdf1d(candidate, c, bins)})
    if reference.d >= 2:
        plots.pdf2d("pdf2d_reference", pdf2d(reference, 0, 1, bins))
        plots.pdf2d("pdf2d_candidate", pdf2d(candidate, 0, 1, bins))
        plots.attractor("attractor", {"reference": reference, "candidate": candidate})
    scripts = plots.export_scripts()

    return {
        "acf_max_dev": _floats(acf_max_deviation(ref_acf, cand_acf)),
        "acf_rms": _floats(acf_rms_error(ref_acf, cand_acf)),
        "pdf_l1": [pdf_l1_distance(reference, candidate, c, bins) for c in range(reference.d)],
        "max_lag": max_lag,
        "scripts": [str(p) for p in scripts],
    }


def eta(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = task.params
    report = eta_test(
        _model(context, params["model"]),
        _series(context, params["data"]),
        n_seeds=int(params.get("n_seeds", 10)),
        mode=params.get("mode", "reconstructed"),
        spin_up=int(params.get("spin_up", 2000)),
        seed=_seed(task, context),
    )
    return report.to_dict()


def eigen_check(task: Task, context: StudyContext) -> Dict[str, Any]:
    """Grand-operator spectrum, optionally matched against expected real eigenvalues"""
    params = task.params
    grand = grand_linear_operator(_model(context, params["model"]))
    result: Dict[str, Any] = {
        "eigenvalues_real": _floats(grand.eigenvalues.real),
        "eigenvalues_imag": _floats(grand.eigenvalues.imag),
        "n_unstable": grand.n_unstable,
        "max_real": float(np.max(grand.eigenvalues.real)),
    }
    expected = params.get("expected")
    if expected is not None:
        expected = np.sort(np.asarray(expected, dtype=float))
        found = np.sort(grand.eigenvalues.real)
        if found.size != expected.size:
            raise DataError(f"Operator has {found.size} eigenvalues, expected {expected.size}")
        result["relative_error"] = _floats(np.abs(found - expected) / np.abs(expected))
    return result


def audit_energy(task: Task, context: StudyContext) -> Dict[str, Any]:
    model = _model(context, task.params["model"])
    return energy_audit(model.main, int(task.params.get("n_samples", 1000)), _seed(task, context)).to_dict()


def whiteness_check(task: Task, context: StudyContext) -> Dict[str, Any]:
    """Stopping test on i.i.d. Gaussian residuals, where it must fire immediately"""
    params = task.params
    n, d = int(params.get("samples", 100_000)), int(params.get("channels", 2))
    residual = member_generator(_seed(task, context)).standard_normal((n, d))
    passed, diag = stopping_test(residual, dt=1.0, config=StoppingConfig(**params.get("stopping", {})))
    return {"passed": int(passed), "trial_r2": list(diag.trial_r2), "lag1": list(diag.lag1)}


def gamma_chain(task: Task, context: StudyContext) -> Dict[str, Any]:
    params = dict(task.params)
    x0 = params.pop("x0")
    duration = float(params.pop("duration", 10.0))
    dt = float(params.pop("dt", 1e-3))
    params.pop("seed", None)
    report = verify_gamma_chain(GammaChainSpec.from_mapping(params), x0, duration, dt)
    out = _task_dir(task, context)
    save_csv(report.chain, out / "chain.csv")
    save_csv(report.direct, out / "direct.csv")
    return report.to_dict()


HANDLERS = {
    "generate_climate": generate_climate,
    "generate_lv": generate_lv,
    "generate_linear_toy": generate_linear_toy,
    "fit": fit,
    "simulate_model": simulate_model,
    "diagnose": diagnose,
    "eta": eta,
    "eigen_check": eigen_check,
    "energy_audit": audit_energy,
    "whiteness_check": whiteness_check,
    "gamma_chain": gamma_chain,
}


def summarize(value: Any) -> Optional[Any]:
    """JSON-safe view of a task result; series and models are dropped"""
    if isinstance(value, dict):
        out = {}
        for key, item in value.items():
            kept = summarize(item)
            if kept is not None:
                out[key] = kept
        return out
    if isinstance(value, (list, tuple)):
        return [summarize(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return None
