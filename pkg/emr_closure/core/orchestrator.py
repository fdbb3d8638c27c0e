"""
EMR Closure - Study Orchestrator
Runs reproduction pipelines as waves of dependent tasks; tasks inside a wave run
concurrently on worker threads (independent eps-sweeps, for example).
"""
import asyncio
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Union

import yaml

from .errors import ConfigError, EmrError
from .events import EventType, emit_event

logger = logging.getLogger(__name__)

STUDIES_DIR = Path(__file__).resolve().parent.parent / "studies"
SCALES = ("desk", "paper")


class TaskStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class Task:
    id: str
    action: str
    dependencies: List[str] = field(default_factory=list)
    params: Dict[str, Any] = field(default_factory=dict)
    stage: str = ""
    status: TaskStatus = TaskStatus.PENDING
    result: Any = None
    error: Optional[str] = None
    duration: float = 0.0


@dataclass
class StudyContext:
    """What every action sees: run directory, scale, base seed and finished task results"""

    out_dir: Path
    scale: str = "desk"
    seed: int = 0
    results: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)

    def output(self, task_id: str) -> Any:
        if task_id not in self.results:
            raise ConfigError(f"Task result {task_id!r} is not available")
        return self.results[task_id]


Handler = Callable[[Task, StudyContext], Any]


def resolve_scaled(value: Any, scale: str) -> Any:
    """Pick the per-scale value from {paper: ..., desk: ...} mappings, recursively"""
    if isinstance(value, dict):
        if set(value) and set(value) <= set(SCALES):
            if scale not in value:
                raise ConfigError(f"No {scale!r} value in {value}")
            return resolve_scaled(value[scale], scale)
        return {k: resolve_scaled(v, scale) for k, v in value.items()}
    if isinstance(value, list):
        return [resolve_scaled(v, scale) for v in value]
    return value


def load_study(name: str, studies_dir: Path = STUDIES_DIR) -> Dict[str, Any]:
    path = studies_dir / f"{name}.yaml"
    if not path.exists():
        available = sorted(p.stem for p in studies_dir.glob("*.yaml"))
        raise ConfigError(f"Unknown study {name!r}; available: {available}")
    with open(path) as f:
        config = yaml.safe_load(f)
    if not isinstance(config, dict) or "stages" not in config:
        raise ConfigError(f"Study file {path} has no stages")
    return config


def sweep_token(value: Any) -> str:
    """Task-id safe spelling of a sweep value: 0.1 -> '0p1', 1.0 -> '1'"""
    return f"{value:g}".replace(".", "p").replace("-", "m") if isinstance(value, (int, float)) else str(value)


def _substitute(node: Any, placeholder: str, token: str) -> Any:
    if isinstance(node, str):
        return node.replace(placeholder, token)
    if isinstance(node, dict):
        return {k: _substitute(v, placeholder, token) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, placeholder, token) for v in node]
    return node


def _pick_for_sweep(node: Any, value: Any, values: Sequence[Any]) -> Any:
    """A mapping keyed by every selected sweep value collapses to the entry for ``value``"""
    if isinstance(node, dict) and node and all(v in node for v in values):
        return node[value]
    if isinstance(node, dict):
        return {k: _pick_for_sweep(v, value, values) for k, v in node.items()}
    return node


def _expand_gate(gate: Dict[str, Any], placeholder: str, name: str,
                 values: Sequence[Any]) -> List[Dict[str, Any]]:
    metric = gate.get("metric")
    if isinstance(metric, list) and any(placeholder in m for m in metric):
        # list metrics collect one entry per sweep value, in sweep order
        expanded = dict(gate)
        expanded["metric"] = [_substitute(m, placeholder, sweep_token(v)) for v in values for m in metric]
        for key in ("threshold", "desk_threshold"):
            bound = gate.get(key)
            if isinstance(bound, dict) and isinstance(bound.get("target"), dict):
                expanded[key] = {**bound, "target": [bound["target"][v] for v in values]}
        return [expanded]
    if placeholder not in gate.get("name", ""):
        return [gate]
    out = []
    for value in values:
        item = _substitute(gate, placeholder, sweep_token(value))
        for key in ("threshold", "desk_threshold"):
            if key in gate:
                item[key] = _pick_for_sweep(gate[key], value, values)
        out.append(item)
    return out


def expand_sweep(config: Dict[str, Any], values: Optional[Sequence[Any]] = None) -> Dict[str, Any]:
    """Instantiate '{name}' task and gate templates once per sweep value.

    Each instantiated task also receives the sweep value itself as params[name].
    """
    sweep = config.get("sweep")
    if not sweep:
        if values:
            raise ConfigError(f"Study {config.get('name', '')!r} has no sweep parameter")
        return config
    name = sweep["name"]
    declared = list(sweep["values"])
    chosen = list(values) if values else declared
    unknown = [v for v in chosen if v not in declared]
    if unknown:
        raise ConfigError(f"{name} values {unknown} are not part of the study sweep {declared}")
    placeholder = "{" + name + "}"

    stages = {}
    for stage_name, stage in config["stages"].items():
        tasks = []
        for task in stage.get("tasks", []):
            if placeholder not in task.get("id", ""):
                # a single task depending on a template waits for every instance
                deps = [_substitute(dep, placeholder, sweep_token(v)) if placeholder in dep else dep
                        for dep in task.get("dependencies", []) for v in (chosen if placeholder in dep else [None])]
                tasks.append({**task, "dependencies": deps})
                continue
            for value in chosen:
                item = _substitute(task, placeholder, sweep_token(value))
                item["params"] = {**item.get("params", {}), name: value}
                tasks.append(item)
        stages[stage_name] = {**stage, "tasks": tasks}

    gates = []
    for gate in config.get("gates", []):
        gates.extend(_expand_gate(gate, placeholder, name, chosen))
    return {**config, "stages": stages, "gates": gates, "sweep": {"name": name, "values": chosen}}


def study_tasks(config: Dict[str, Any], scale: str) -> List[Task]:
    """Flatten the stage -> tasks layout into Task objects"""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    tasks: List[Task] = []
    for stage_name, stage in config["stages"].items():
        for task_config in stage.get("tasks", []):
            try:
                tasks.append(Task(
                    id=task_config["id"],
                    action=task_config["action"],
                    dependencies=list(task_config.get("dependencies", [])),
                    params=resolve_scaled(task_config.get("params", {}), scale),
                    stage=stage_name,
                ))
            except KeyError as e:
                raise ConfigError(f"Task in stage {stage_name!r} is missing {e}") from e
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError("Study task ids must be unique")
    return tasks


class StudyOrchestrator:
    """Dependency-ordered execution of study tasks"""

    def __init__(self, context: StudyContext, handlers: Optional[Dict[str, Handler]] = None,
                 concurrent: bool = True):
        self.context = context
        self.handlers: Dict[str, Handler] = dict(handlers or {})
        self.concurrent = concurrent
        self.tasks: Dict[str, Task] = {}

    def register(self, action: str, handler: Handler) -> None:
        self.handlers[action] = handler

    def add_task(self, task: Task) -> None:
        self.tasks[task.id] = task

    def calculate_waves(self, tasks: List[Task]) -> List[List[Task]]:
        """Group tasks into waves based on dependencies"""
        known = {t.id for t in tasks}
        for task in tasks:
            missing = [dep for dep in task.dependencies if dep not in known]
            if missing:
                raise ConfigError(f"Task {task.id!r} depends on unknown tasks {missing}")

        waves = []
        completed_ids = set()
        remaining = list(tasks)
        while remaining:
            wave = [t for t in remaining if all(dep in completed_ids for dep in t.dependencies)]
            if not wave:
                raise ConfigError("Circular dependency detected among study tasks")
            waves.append(wave)
            completed_ids.update(t.id for t in wave)
            remaining = [t for t in remaining if t not in wave]
        return waves

    async def execute_task(self, task: Task) -> Task:
        failed_deps = [dep for dep in task.dependencies
                       if self.tasks.get(dep) and self.tasks[dep].status != TaskStatus.COMPLETED]
        if failed_deps:
            task.status = TaskStatus.SKIPPED
            task.error = f"Skipped: dependencies failed ({', '.join(failed_deps)})"
            logger.warning(f"{task.id}: {task.error}")
            return task

        handler = self.handlers.get(task.action)
        task.status = TaskStatus.RUNNING
        emit_event(EventType.TASK_STARTED, "orchestrator", {"task_id": task.id, "task_type": task.action})
        started = time.perf_counter()
        try:
            if handler is None:
                raise ConfigError(f"Unknown study action: {task.action}")
            if asyncio.iscoroutinefunction(handler):
                result = await handler(task, self.context)
            elif self.concurrent:
                result = await asyncio.to_thread(handler, task, self.context)
            else:
                result = handler(task, self.context)
            task.result = result
            task.status = TaskStatus.COMPLETED
            self.context.results[task.id] = result
        except EmrError as e:
            task.error = str(e)
            task.status = TaskStatus.FAILED
        except Exception as e:  # noqa: BLE001
            logger.exception(f"Task {task.id} crashed")
            task.error = f"{type(e).__name__}: {e}"
            task.status = TaskStatus.FAILED
        task.duration = time.perf_counter() - started

        if task.status == TaskStatus.COMPLETED:
            emit_event(EventType.TASK_COMPLETED, "orchestrator",
                       {"task_id": task.id, "task_type": task.action, "duration_seconds": task.duration})
        else:
            emit_event(EventType.TASK_FAILED, "orchestrator", {"task_id": task.id, "error": task.error})
        return task

    async def execute_wave(self, tasks: List[Task]) -> List[Task]:
        """Execute tasks wave by wave; tasks inside one wave run together"""
        for task in tasks:
            self.add_task(task)
        waves = self.calculate_waves(tasks)
        all_results: List[Task] = []

        for i, wave in enumerate(waves):
            emit_event(EventType.WAVE_STARTED, "orchestrator",
                       {"wave": i + 1, "tasks": [t.id for t in wave]})
            wave_results = await asyncio.gather(*[self.execute_task(t) for t in wave])
            all_results.extend(wave_results)
            emit_event(EventType.WAVE_COMPLETED, "orchestrator", {
                "wave": i + 1,
                "failed": [t.id for t in wave_results if t.status != TaskStatus.COMPLETED],
            })
        return all_results

    def synthesize_results(self, results: List[Task]) -> Dict[str, Any]:
        synthesis: Dict[str, Any] = {
            "by_stage": {},
            "metrics": {
                "total_tasks": len(results),
                "completed": sum(1 for r in results if r.status == TaskStatus.COMPLETED),
                "failed": sum(1 for r in results if r.status == TaskStatus.FAILED),
                "skipped": sum(1 for r in results if r.status == TaskStatus.SKIPPED),
            },
        }
        for task in results:
            synthesis["by_stage"].setdefault(task.stage, []).append({
                "id": task.id,
                "action": task.action,
                "status": task.status.value,
                "duration": round(task.duration, 3),
                "error": task.error,
            })
        return synthesis


def run_study(config: Dict[str, Any], context: StudyContext,
              handlers: Dict[str, Union[Handler, Callable[..., Awaitable[Any]]]],
              concurrent: bool = True) -> List[Task]:
    """Synchronous entry point for the CLI"""
    orchestrator = StudyOrchestrator(context, handlers, concurrent)
    tasks = study_tasks(config, context.scale)
    return asyncio.run(orchestrator.execute_wave(tasks))
