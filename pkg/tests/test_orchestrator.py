"""Study loading, sweep expansion and wave execution"""
import asyncio

import pytest

from emr_closure.core.criteria import CriteriaRunner
from emr_closure.core.errors import ConfigError, DataError
from emr_closure.core.events import EventType, event_bus
from emr_closure.core.orchestrator import (StudyContext, StudyOrchestrator, Task, TaskStatus, expand_sweep,
                                           load_study, resolve_scaled, run_study, study_tasks, sweep_token)


@pytest.fixture
def context(tmp_path):
    return StudyContext(out_dir=tmp_path)


def test_resolve_scaled():
    raw = {"dt": {"paper": 0.001, "desk": 0.01}, "seed": 3, "grid": [{"paper": 1, "desk": 2}]}
    assert resolve_scaled(raw, "desk") == {"dt": 0.01, "seed": 3, "grid": [2]}
    assert resolve_scaled(raw, "paper")["dt"] == 0.001
    with pytest.raises(ConfigError):
        resolve_scaled({"paper": 1}, "desk")


def test_sweep_token():
    assert [sweep_token(v) for v in (0.1, 0.5, 1.0, 1.5)] == ["0p1", "0p5", "1", "1p5"]
    assert sweep_token(-2.5) == "m2p5"
    assert sweep_token("abc") == "abc"


@pytest.mark.parametrize("name", ["climate", "lv", "linear-toy", "gamma-chain"])
def test_shipped_studies_resolve(name):
    config = expand_sweep(load_study(name))
    for scale in ("desk", "paper"):
        tasks = study_tasks(config, scale)
        waves = StudyOrchestrator(StudyContext(out_dir=".")).calculate_waves(tasks)
        assert sum(len(w) for w in waves) == len(tasks)


def test_unknown_study():
    with pytest.raises(ConfigError, match="Unknown study"):
        load_study("weather")


def test_climate_sweep_expansion():
    config = expand_sweep(load_study("climate"))
    ids = [t["id"] for t in config["stages"]["generate"]["tasks"]]
    assert ids == ["generate_0p1", "generate_0p5", "generate_1", "generate_1p5"]

    fit = config["stages"]["fit"]["tasks"][2]
    assert fit["id"] == "fit_1"
    assert fit["dependencies"] == ["generate_1"]
    assert fit["params"]["eps"] == 1.0

    gates = {g["name"]: g for g in config["gates"]}
    assert gates["acf_x1_1p5"]["threshold"] == 0.15
    assert gates["acf_x1_1p5"]["metric"] == "diagnose_1p5.acf_max_dev.0"
    assert gates["acf_x1_0p1"]["desk_threshold"] == 0.20
    assert gates["acf_x2_1p5"]["threshold"] == 0.10
    assert gates["acf_x2_1p5"]["metric"] == "diagnose_1p5.acf_max_dev.1"
    assert gates["eta_values"]["metric"] == ["eta_0p1.max_abs", "eta_0p5.max_abs", "eta_1.max_abs",
                                             "eta_1p5.max_abs"]
    assert gates["eta_values"]["threshold"]["target"] == [0.11, 0.33, 0.42, 0.47]


def test_lv_desk_gates_need_unstable_modes_and_a_deep_cascade():
    runner = CriteriaRunner.from_config(load_study("lv"), "desk")
    results = {"fit": {"p": 3}, "simulate": {"min_value": 0.12}, "diagnose": {"acf_rms": [0.1, 0.2, 0.1]},
               "spectrum": {"n_unstable": 0}}
    outcome = {r.name: r.passed for r in runner.run(results).results}
    assert outcome == {"levels": False, "reflection_floor": True, "acf_rms": True, "unstable_modes": False}

    results["fit"]["p"], results["spectrum"]["n_unstable"] = 6, 3
    assert all(r.passed for r in runner.run(results).results)


def test_sweep_subset():
    config = expand_sweep(load_study("climate"), [0.5])
    assert [t["id"] for t in config["stages"]["fit"]["tasks"]] == ["fit_0p5"]
    assert config["sweep"]["values"] == [0.5]
    with pytest.raises(ConfigError):
        expand_sweep(load_study("climate"), [0.3])
    with pytest.raises(ConfigError):
        expand_sweep(load_study("linear-toy"), [0.1])


def test_template_dependency_fans_in():
    config = {
        "sweep": {"name": "eps", "values": [1, 2]},
        "stages": {
            "a": {"tasks": [{"id": "gen_{eps}", "action": "noop"}]},
            "b": {"tasks": [{"id": "collect", "action": "noop", "dependencies": ["gen_{eps}"]}]},
        },
    }
    expanded = expand_sweep(config)
    assert expanded["stages"]["b"]["tasks"][0]["dependencies"] == ["gen_1", "gen_2"]


def test_study_tasks_checks():
    config = {"stages": {"s": {"tasks": [{"id": "a", "action": "x"}, {"id": "a", "action": "y"}]}}}
    with pytest.raises(ConfigError, match="unique"):
        study_tasks(config, "desk")
    with pytest.raises(ConfigError):
        study_tasks({"stages": {"s": {"tasks": [{"id": "a"}]}}}, "desk")
    with pytest.raises(ConfigError):
        study_tasks(config, "huge")


def test_waves_follow_dependencies(context):
    tasks = [
        Task("fit", "noop", ["gen"]),
        Task("gen", "noop"),
        Task("eta", "noop", ["fit", "gen"]),
        Task("sim", "noop", ["fit"]),
    ]
    waves = StudyOrchestrator(context).calculate_waves(tasks)
    assert [[t.id for t in w] for w in waves] == [["gen"], ["fit"], ["eta", "sim"]]


def test_wave_errors(context):
    orchestrator = StudyOrchestrator(context)
    with pytest.raises(ConfigError, match="unknown"):
        orchestrator.calculate_waves([Task("a", "noop", ["missing"])])
    with pytest.raises(ConfigError, match="Circular"):
        orchestrator.calculate_waves([Task("a", "noop", ["b"]), Task("b", "noop", ["a"])])


@pytest.mark.asyncio
async def test_results_flow_between_tasks(context):
    def generate(task, ctx):
        return {"value": task.params["value"]}

    async def double(task, ctx):
        await asyncio.sleep(0)
        return {"value": 2 * ctx.output("gen")["value"]}

    orchestrator = StudyOrchestrator(context, {"generate": generate, "double": double})
    results = await orchestrator.execute_wave([
        Task("gen", "generate", params={"value": 21}),
        Task("dbl", "double", ["gen"]),
    ])
    assert [t.status for t in results] == [TaskStatus.COMPLETED, TaskStatus.COMPLETED]
    assert context.results["dbl"] == {"value": 42}
    assert len(event_bus.get_events_by_type(EventType.WAVE_COMPLETED)) == 2


@pytest.mark.asyncio
async def test_failures_skip_dependents(context):
    def broken(task, ctx):
        raise DataError("too short")

    def crash(task, ctx):
        raise ValueError("unexpected")

    orchestrator = StudyOrchestrator(context, {"broken": broken, "crash": crash, "ok": lambda t, c: 1},
                                     concurrent=False)
    results = await orchestrator.execute_wave([
        Task("a", "broken", stage="s1"),
        Task("b", "ok", ["a"], stage="s2"),
        Task("c", "crash", stage="s1"),
        Task("d", "missing_action", stage="s1"),
    ])
    status = {t.id: t for t in results}
    assert status["a"].status == TaskStatus.FAILED and status["a"].error == "too short"
    assert status["b"].status == TaskStatus.SKIPPED
    assert status["c"].error == "ValueError: unexpected"
    assert "Unknown study action" in status["d"].error

    summary = orchestrator.synthesize_results(results)
    assert summary["metrics"] == {"total_tasks": 4, "completed": 0, "failed": 3, "skipped": 1}
    assert [entry["id"] for entry in summary["by_stage"]["s1"]] == ["a", "c", "d"]
    assert len(event_bus.get_events_by_type(EventType.TASK_FAILED)) == 3


def test_run_study_is_synchronous(context):
    config = {"stages": {"only": {"tasks": [{"id": "t", "action": "scaled", "params": {"n": {"desk": 2,
                                                                                          "paper": 20}}}]}}}
    results = run_study(config, context, {"scaled": lambda task, ctx: task.params["n"]})
    assert results[0].result == 2
    assert context.output("t") == 2
    with pytest.raises(ConfigError):
        context.output("nope")
