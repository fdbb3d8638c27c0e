#!/usr/bin/env python3
"""
EMR Closure - Command Line Interface
Generate reference data, fit multilevel closures, simulate, forecast, diagnose and
reproduce the benchmark studies.
"""
import functools
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .core.config import AppConfig, load_config, parse_overrides
from .core.criteria import CriteriaRunner
from .core.emr import EMRModel, FitReport, fit_emr, load_model, save_model
from .core.errors import AcceptanceError, BlowUpError, ConfigError, EmrError
from .core.events import EventLogger, EventType, event_bus
from .core.manifest import RunManifest
from .core.orchestrator import StudyContext, TaskStatus, expand_sweep, load_study, run_study
from .core.simulate import (ReflectionSpec, SimConfig, eta_test, forecast, init_hidden_backward,
                            project_positive, save_ensemble, simulate_emr)
from .core.timeseries import (acf, acf_max_deviation, acf_rms_error, load_csv, pdf1d, pdf2d,
                              pdf_l1_distance, save_csv, variance_by_channel)
from .tools.actions import HANDLERS, summarize
from .tools.reference.presets import load_param_file, load_preset, run_preset
from .tools.reporting.plots import PlotGenerator, gate_report_markdown

console = Console()
logger = logging.getLogger("emr_closure")

STUDIES = ("climate", "lv", "linear-toy", "gamma-chain")


@dataclass
class CliState:
    config: AppConfig
    overrides: Sequence[str] = ()


def _setup_logging(level: str) -> None:
    root = logging.getLogger("emr_closure")
    root.handlers = [RichHandler(console=Console(stderr=True), show_path=False, markup=False)]
    root.setLevel(level)
    root.propagate = False


def _fail(error: EmrError) -> None:
    console.print(f"[red]❌ {type(error).__name__}: {error}[/red]")
    if isinstance(error, BlowUpError) and error.step is not None:
        console.print(f"[dim]Blow-up at step {error.step}[/dim]")
    raise SystemExit(error.exit_code)


def guarded(func):
    """Translate library errors into exit codes"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EmrError as e:
            _fail(e)
    return wrapper


@contextmanager
def recorded(state: CliState, command: str, out_dir: Path, arguments: Dict[str, Any]) -> Iterator[RunManifest]:
    """Every run leaves one manifest.json in its output directory, failed runs included"""
    manifest = RunManifest(command, state.config.snapshot(), __version__,
                           arguments={k: v for k, v in arguments.items() if v is not None})
    try:
        yield manifest
    except EmrError as e:
        manifest.finish(f"failed: {type(e).__name__}")
        manifest.write(out_dir)
        raise
    manifest.finish("ok")
    manifest.write(out_dir)


def _reflection(epsilon: Optional[float], state: CliState) -> ReflectionSpec:
    return ReflectionSpec.at(epsilon if epsilon is not None else state.config.simulate.reflect)


def _fit_table(report: FitReport) -> Table:
    table = Table(title=f"Fit report (stop_reason = {report.stop_reason})")
    table.add_column("Level", style="cyan")
    table.add_column("Samples", justify="right")
    table.add_column("lag-1 ACF", style="green")
    table.add_column("Trial R²", style="green")
    table.add_column("Cov eigenvalues", style="yellow")
    table.add_column("Δcov", justify="right")
    table.add_column("White", justify="center")
    for diag in report.levels:
        table.add_row(
            str(diag.level),
            str(diag.n_samples),
            ", ".join(f"{v:+.3f}" for v in diag.lag1),
            ", ".join(f"{v:.3f}" for v in diag.trial_r2),
            ", ".join(f"{v:.3g}" for v in diag.cov_eigenvalues),
            "-" if diag.cov_change is None else f"{diag.cov_change:.3f}",
            "✅" if diag.passed else "·",
        )
    return table


@click.group()
@click.version_option(version=__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML configuration layered over the defaults")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Configuration override, e.g. fit.ridge=0 (repeatable)")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
@click.option("--event-log", type=click.Path(dir_okay=False), default=None,
              help="Append structured events to this file")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], overrides: Sequence[str],
        log_level: Optional[str], event_log: Optional[str]):
    """EMR Closure - multilevel stochastic closures fitted from partial observations"""
    try:
        config = load_config(config_path, overrides)
    except EmrError as e:
        _fail(e)
    _setup_logging((log_level or config.log_level).upper())
    if event_log:
        events = EventLogger(event_log)
        event_bus.subscribe_all(events.log_event)

        def detach():
            event_bus.unsubscribe(events.log_event)
            events.close()

        ctx.call_on_close(detach)
    ctx.obj = CliState(config, overrides)


@cli.command("simulate-reference")
@click.option("--preset", default=None, help="paper-climate, paper-lv, paper-linear or gamma-chain")
@click.option("--param-file", type=click.Path(dir_okay=False), default=None,
              help="YAML file with the preset schema")
@click.option("--param", "params", multiple=True, metavar="KEY=VALUE",
              help="Preset override, e.g. run.duration=100 or params.sigma=[0,0]")
@click.option("--eps", type=float, default=None, help="Scale separation (climate only)")
@click.option("--seed", type=int, default=None)
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def simulate_reference(state: CliState, preset: Optional[str], param_file: Optional[str],
                       params: Sequence[str], eps: Optional[float], seed: Optional[int], out_dir: str):
    """Generate ground-truth trajectories from a reference model"""
    out = Path(out_dir)
    with recorded(state, "simulate-reference", out, {"preset": preset, "param_file": param_file,
                                                     "params": list(params), "eps": eps, "seed": seed}) as manifest:
        if (preset is None) == (param_file is None):
            raise ConfigError("Give exactly one of --preset and --param-file")
        chosen = load_preset(preset) if preset else load_param_file(param_file)
        if param_file:
            manifest.add_input(param_file)
        overrides = parse_overrides(params)
        if eps is not None:
            if chosen.model != "climate":
                raise ConfigError(f"--eps applies to the climate model, not {chosen.model}")
            overrides.setdefault("params", {})["eps"] = eps
        chosen = chosen.with_overrides(overrides)
        console.print(f"[bold blue]🌐 Simulating {chosen.name} ({chosen.model})[/bold blue]")

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console) as progress:
            progress.add_task("Integrating...", total=None)
            result = run_preset(chosen, out, seed)

        manifest.seeds.extend(result["seeds"])
        manifest.config = {**manifest.config, "preset": chosen.to_dict()}
        for path in result["outputs"]:
            manifest.add_output(path)
            console.print(f"[green]✅ {path}[/green]")


@cli.command()
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--dt", type=float, default=None, help="Sampling interval when the CSV has no sidecar")
@click.option("--constraints", type=click.Choice(["none", "energy"]), default=None)
@click.option("--ridge", default=None, help="'auto' or a non-negative number")
@click.option("--max-levels", type=int, default=None)
@click.option("--levels", "n_levels", type=int, default=None, help="Force exactly this many hidden levels")
@click.option("--linear", is_flag=True, help="Drop the quadratic main-level terms")
@click.option("--skip", type=int, default=None,
              help="Leading samples to drop [default: diagnostics.transient_fraction of the record]")
@click.option("-o", "--out", "model_path", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
@guarded
def fit(state: CliState, data: str, dt: Optional[float], constraints: Optional[str], ridge: Optional[str],
        max_levels: Optional[int], n_levels: Optional[int], linear: bool, skip: Optional[int],
        model_path: str):
    """Fit a multilevel closure model to observed data"""
    out = Path(model_path)
    settings = state.config.fit
    with recorded(state, "fit", out.parent, {"data": data, "dt": dt, "constraints": constraints, "ridge": ridge,
                                             "max_levels": max_levels, "levels": n_levels, "linear": linear,
                                             "skip": skip}) as manifest:
        manifest.add_input(data)
        ts = load_csv(data, dt, skip, state.config.diagnostics.transient_fraction)
        manifest.arguments["samples"] = ts.n
        ridge_value: Any = settings.ridge
        if ridge is not None:
            try:
                ridge_value = ridge if ridge == "auto" else float(ridge)
            except ValueError as e:
                raise ConfigError(f"--ridge must be 'auto' or a number, got {ridge!r}") from e
        stopping = settings.stopping
        if max_levels is not None:
            stopping = replace(stopping, max_levels=max_levels)

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console) as progress:
            progress.add_task(f"Fitting {ts.d} channels x {ts.n} samples...", total=None)
            model = fit_emr(
                ts,
                constraints=constraints or settings.constraints,
                ridge=ridge_value,
                stopping=stopping,
                n_levels=n_levels if n_levels is not None else settings.n_levels,
                quadratic=settings.quadratic and not linear,
                source="cli.fit",
            )
        manifest.add_output(save_model(model, out))

        console.print(_fit_table(model.report))
        console.print(f"[bold]stop_reason:[/bold] {model.report.stop_reason}   "
                      f"[bold]p:[/bold] {model.p}   [bold]main R²:[/bold] "
                      f"{', '.join(f'{v:.4f}' for v in model.report.main_r2)}")
        console.print(f"[green]✅ Model saved to {out}[/green]")


@cli.command("simulate-model")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.option("--steps", type=int, required=True)
@click.option("--seed", type=int, default=None)
@click.option("--reflect", type=float, default=None, help="Reflect x onto the box x_i >= EPS")
@click.option("--stride", type=int, default=None, help="Record every STRIDE-th step")
@click.option("--burn-in", type=int, default=None)
@click.option("--data", type=click.Path(dir_okay=False), default=None,
              help="Start from the beginning of this record with hidden levels initialized from it")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def simulate_model(state: CliState, model_path: str, steps: int, seed: Optional[int], reflect: Optional[float],
                   stride: Optional[int], burn_in: Optional[int], data: Optional[str], out_dir: str):
    """Run a fitted model forward in time"""
    out = Path(out_dir)
    defaults = state.config.simulate
    seed = defaults.seed if seed is None else seed
    with recorded(state, "simulate-model", out, {"model": model_path, "steps": steps, "seed": seed,
                                                 "reflect": reflect, "stride": stride, "burn_in": burn_in,
                                                 "data": data}) as manifest:
        manifest.add_input(model_path)
        manifest.seeds.append(seed)
        model = load_model(model_path)
        reflection = _reflection(reflect, state)
        x0, hidden0 = _start_state(model, data, manifest)
        if reflection.enabled:
            x0 = project_positive(x0, reflection.epsilon)
        config = SimConfig(steps=steps, seed=seed,
                           sample_stride=stride if stride is not None else defaults.sample_stride,
                           burn_in=burn_in if burn_in is not None else defaults.burn_in)

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console) as progress:
            progress.add_task(f"Stepping p={model.p} model for {steps} steps...", total=None)
            ts = simulate_emr(model, x0, hidden0, config, reflection, source="cli.simulate")

        path = save_csv(ts, out / "simulated.csv")
        manifest.add_output(path)
        console.print(f"[green]✅ {ts.n} samples written to {path}[/green]")


def _start_state(model: EMRModel, data: Optional[str], manifest: RunManifest):
    if data is None:
        return np.zeros(model.d), None
    manifest.add_input(data)
    window = load_csv(data, model.dt, 0)
    history = init_hidden_backward(model, window)
    return history.x[0], history.state_at(0)


@cli.command("forecast")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--horizon", type=int, required=True)
@click.option("--ensemble", "n_ensemble", type=int, default=1)
@click.option("--seed", type=int, default=None)
@click.option("--reflect", type=float, default=None)
@click.option("--window", type=int, default=None, help="Use only the last WINDOW samples of DATA")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def forecast_cmd(state: CliState, model_path: str, data: str, horizon: int, n_ensemble: int, seed: Optional[int],
                 reflect: Optional[float], window: Optional[int], out_dir: str):
    """Ensemble forecast from the end of an observed record"""
    out = Path(out_dir)
    seed = state.config.simulate.seed if seed is None else seed
    with recorded(state, "forecast", out, {"model": model_path, "data": data, "horizon": horizon,
                                           "ensemble": n_ensemble, "seed": seed, "reflect": reflect,
                                           "window": window}) as manifest:
        manifest.add_input(model_path)
        manifest.add_input(data)
        manifest.seeds.append(seed)
        model = load_model(model_path)
        ts = load_csv(data, model.dt, 0)
        if window is not None:
            ts = ts.slice(max(0, ts.n - window))
        ensemble = forecast(model, ts, horizon, n_ensemble, seed, _reflection(reflect, state))
        for path in save_ensemble(ensemble, out):
            manifest.add_output(path)

        table = Table(title=f"Forecast ({n_ensemble} members, horizon {horizon})")
        table.add_column("Channel", style="cyan")
        table.add_column("Mean at horizon", style="green")
        table.add_column("Std at horizon", style="yellow")
        mean, std = ensemble.mean()[-1], ensemble.std()[-1]
        for c, name in enumerate(ensemble.names):
            table.add_row(name, f"{mean[c]:.6g}", f"{std[c]:.3g}")
        console.print(table)
        console.print(f"[green]✅ Ensemble written to {out}[/green]")


@cli.command()
@click.argument("data", type=click.Path(dir_okay=False))
@click.argument("other", type=click.Path(dir_okay=False), required=False)
@click.option("--dt", type=float, default=None)
@click.option("--acf", "max_lag", type=int, default=None, help="Largest ACF lag in samples")
@click.option("--pdf1d/--no-pdf1d", "with_pdf1d", default=True)
@click.option("--pdf2d", "pdf2d_pair", type=int, nargs=2, default=None, metavar="I J")
@click.option("--bins", type=int, default=None)
@click.option("--skip-transient", is_flag=True, help="Drop the configured leading fraction of each record")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def diagnose(state: CliState, data: str, other: Optional[str], dt: Optional[float], max_lag: Optional[int],
             with_pdf1d: bool, pdf2d_pair, bins: Optional[int], skip_transient: bool, out_dir: str):
    """Statistics of one record, or paired statistics of two"""
    out = Path(out_dir)
    settings = state.config.diagnostics
    max_lag = settings.acf_max_lag if max_lag is None else max_lag
    bins = settings.pdf_bins if bins is None else bins
    skip = None if skip_transient else 0
    with recorded(state, "diagnose", out, {"data": data, "other": other, "acf": max_lag, "bins": bins,
                                           "pdf2d": list(pdf2d_pair) if pdf2d_pair else None}) as manifest:
        series = {"data": load_csv(data, dt, skip, settings.transient_fraction)}
        manifest.add_input(data)
        if other:
            series["other"] = load_csv(other, dt, skip, settings.transient_fraction)
            manifest.add_input(other)
        reference = series["data"]
        if any(ts.d != reference.d for ts in series.values()):
            raise ConfigError("Paired diagnostics need the same channels in both records")

        plots = PlotGenerator(out)
        curves = {label: acf(ts, min(max_lag, ts.n - 1)) for label, ts in series.items()}
        for c in range(reference.d):
            plots.acf_overlay(f"acf_{reference.names[c]}", curves, channel=c)
            if with_pdf1d:
                plots.pdf_overlay(f"pdf_{reference.names[c]}",
                                  {label: pdf1d(ts, c, bins, settings.range_padding) for label, ts in series.items()})
        if pdf2d_pair:
            i, j = pdf2d_pair
            for label, ts in series.items():
                plots.pdf2d(f"pdf2d_{label}", pdf2d(ts, i, j, settings.pdf2d_bins, settings.range_padding))
        plots.export_scripts()

        summary: Dict[str, Any] = {
            "variance": {label: variance_by_channel(ts).tolist() for label, ts in series.items()},
            "max_lag": max_lag,
        }
        if other:
            other_ts = series["other"]
            summary["acf_max_deviation"] = acf_max_deviation(curves["data"], curves["other"]).tolist()
            summary["acf_rms_error"] = acf_rms_error(curves["data"], curves["other"]).tolist()
            summary["pdf_l1"] = [pdf_l1_distance(reference, other_ts, c, bins, settings.range_padding)
                                 for c in range(reference.d)]
        summary_path = out / "summary.json"
        with open(summary_path, "w") as f:
            json.dump(summary, f, indent=2)
        for path in [*plots.files, summary_path]:
            manifest.add_output(path)

        if other:
            table = Table(title="Paired diagnostics")
            table.add_column("Channel", style="cyan")
            table.add_column("max |ΔACF|", style="green")
            table.add_column("RMS ΔACF", style="green")
            table.add_column("PDF L¹", style="yellow")
            for c, name in enumerate(reference.names):
                table.add_row(name, f"{summary['acf_max_deviation'][c]:.4f}",
                              f"{summary['acf_rms_error'][c]:.4f}", f"{summary['pdf_l1'][c]:.4f}")
            console.print(table)
        console.print(f"[green]✅ Statistics and plot scripts written to {out}[/green]")


@cli.command("eta-test")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--seeds", "n_seeds", type=int, default=None)
@click.option("--mode", type=click.Choice(["reconstructed", "simulated"]), default=None)
@click.option("--spin-up", type=int, default=None)
@click.option("--seed", type=int, default=0, help="First seed of the ensemble")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def eta_test_cmd(state: CliState, model_path: str, data: str, n_seeds: Optional[int], mode: Optional[str],
                 spin_up: Optional[int], seed: int, out_dir: str):
    """Correlation between the closure's noise forcing and the observed state"""
    out = Path(out_dir)
    settings = state.config.eta
    n_seeds = settings.n_seeds if n_seeds is None else n_seeds
    with recorded(state, "eta-test", out, {"model": model_path, "data": data, "seeds": n_seeds,
                                           "mode": mode, "spin_up": spin_up, "seed": seed}) as manifest:
        manifest.add_input(model_path)
        manifest.add_input(data)
        manifest.seeds.extend(range(seed, seed + n_seeds))
        model = load_model(model_path)
        report = eta_test(model, load_csv(data, model.dt, 0), n_seeds, mode or settings.mode,
                          settings.spin_up if spin_up is None else spin_up, seed)
        path = out / "eta.json"
        out.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
        manifest.add_output(path)

        table = Table(title=f"Eta-test ({report.mode}, {report.n_seeds} seeds)")
        table.add_column("Channel", style="cyan")
        table.add_column("ρ", style="green")
        table.add_column("Spread", style="yellow")
        for name, rho, spread in zip(report.names, report.rho, report.spread):
            table.add_row(name, f"{rho:+.3f}", f"{spread:.3f}")
        console.print(table)
        console.print(f"[bold]max |ρ|:[/bold] {report.max_abs:.3f}"
                      + ("  [yellow](degenerate)[/yellow]" if report.degenerate else ""))


@cli.command()
@click.argument("study", type=click.Choice(STUDIES))
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--eps", "eps", default="all", show_default=True, help="'all' or one value of the climate sweep")
@click.option("--seed", type=int, default=0)
@click.option("--sequential", is_flag=True, help="Run tasks one at a time")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@guarded
def reproduce(state: CliState, study: str, scale: str, eps: str, seed: int, sequential: bool, out_dir: str):
    """Run a benchmark study end to end and check its acceptance gates"""
    out = Path(out_dir)
    with recorded(state, "reproduce", out, {"study": study, "scale": scale, "eps": eps, "seed": seed,
                                            "sequential": sequential}) as manifest:
        manifest.seeds.append(seed)
        config = load_study(study)
        if eps != "all":
            try:
                config = expand_sweep(config, [float(eps)])
            except ValueError as e:
                raise ConfigError(f"--eps must be 'all' or a number, got {eps!r}") from e
        else:
            config = expand_sweep(config)
        context = StudyContext(out, scale, seed, settings={"study": study})
        n_tasks = sum(len(stage.get("tasks", [])) for stage in config["stages"].values())
        console.print(f"[bold magenta]🔄 Reproducing {study} at {scale} scale ({n_tasks} tasks)[/bold magenta]")

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(),
                      console=console) as progress:
            bar = progress.add_task("Running study...", total=n_tasks)

            def advance(event):
                progress.update(bar, advance=1, description=f"{event.data.get('task_id')}")

            event_bus.subscribe(EventType.TASK_COMPLETED, advance)
            event_bus.subscribe(EventType.TASK_FAILED, advance)
            try:
                tasks = run_study(config, context, HANDLERS, concurrent=not sequential)
            finally:
                event_bus.unsubscribe(advance)

        runner = CriteriaRunner.from_config(config, scale)
        report = runner.run(context.results)
        report_dict = report.to_dict()
        results_path = out / "results.json"
        with open(results_path, "w") as f:
            json.dump({"tasks": {t.id: {"status": t.status.value, "error": t.error,
                                        "result": summarize(t.result)} for t in tasks}}, f, indent=2)
        report_path = out / "report.json"
        with open(report_path, "w") as f:
            json.dump(report_dict, f, indent=2)
        markdown_path = out / "report.md"
        markdown_path.write_text(gate_report_markdown(report_dict, study))
        for path in (results_path, report_path, markdown_path):
            manifest.add_output(path)

        table = Table(title=f"{study} gates ({scale})")
        table.add_column("Gate", style="cyan")
        table.add_column("Value", style="green")
        table.add_column("Threshold", style="yellow")
        table.add_column("Status")
        for gate in report.results:
            table.add_row(gate.name, _short(gate.value), _short(gate.threshold),
                          "✅ pass" if gate.passed else "❌ fail")
        console.print(table)
        failed_tasks = [t.id for t in tasks if t.status != TaskStatus.COMPLETED]
        if failed_tasks:
            console.print(f"[yellow]⚠️  Tasks not completed: {', '.join(failed_tasks)}[/yellow]")
        if not report.passed:
            raise AcceptanceError(f"{len(report.failures)} of {len(report.results)} gates failed")
        console.print(f"[green]✅ All gates passed; report at {report_path}[/green]")


def _short(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    if isinstance(value, list):
        return "[" + ", ".join(_short(v) for v in value) + "]"
    return str(value)


if __name__ == "__main__":
    cli()
