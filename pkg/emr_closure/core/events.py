"""
EMR Closure - Event-Driven Observability
Fits, simulations, study tasks and gates report progress through one bus
"""
import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)

Handler = Callable[["Event"], None]


class EventType(Enum):
    # Fitting
    LEVEL_FITTED = "fit.level_fitted"
    STOPPING_CHECKED = "fit.stopping_checked"
    FIT_COMPLETED = "fit.completed"

    # Simulation
    SIMULATION_STARTED = "simulation.started"
    SIMULATION_COMPLETED = "simulation.completed"
    SIMULATION_BLOWUP = "simulation.blowup"

    # Study tasks and waves
    TASK_STARTED = "task.started"
    TASK_COMPLETED = "task.completed"
    TASK_FAILED = "task.failed"
    WAVE_STARTED = "wave.started"
    WAVE_COMPLETED = "wave.completed"

    # Acceptance gates
    GATE_PASSED = "gate.passed"
    GATE_FAILED = "gate.failed"

    @property
    def is_failure(self) -> bool:
        return self in _FAILURES


_FAILURES = frozenset({EventType.TASK_FAILED, EventType.GATE_FAILED, EventType.SIMULATION_BLOWUP})
_TIMED = frozenset({EventType.TASK_COMPLETED, EventType.FIT_COMPLETED, EventType.SIMULATION_COMPLETED})


@dataclass
class Event:
    id: str
    type: EventType
    timestamp: datetime
    source: str
    data: Dict[str, Any]
    metadata: Optional[Dict[str, Any]] = None

    def describe_failure(self) -> str:
        if self.type == EventType.SIMULATION_BLOWUP:
            return f"non-finite state at step {self.data.get('step')}"
        return str(self.data.get("error", self.data.get("reason", "unknown error")))

    def to_json(self) -> str:
        # numpy scalars and paths fall back to str
        return json.dumps({
            "id": self.id,
            "type": self.type.value,
            "timestamp": self.timestamp.isoformat(),
            "source": self.source,
            "data": self.data,
            "metadata": self.metadata or {},
        }, default=str)


@dataclass
class EventMetrics:
    """Counts per event type, mean durations of timed events and the failure record"""

    counts: Dict[str, int] = field(default_factory=dict)
    durations: Dict[str, List[float]] = field(default_factory=dict)
    errors: List[Dict[str, Any]] = field(default_factory=list)
    levels_fitted: int = 0
    simulated_steps: int = 0

    def record(self, event: Event) -> None:
        key = event.type.value
        self.counts[key] = self.counts.get(key, 0) + 1

        if event.type in _TIMED and event.data.get("duration_seconds") is not None:
            label = event.data.get("task_type", key)
            self.durations.setdefault(label, []).append(float(event.data["duration_seconds"]))
        if event.type == EventType.LEVEL_FITTED:
            self.levels_fitted += 1
        elif event.type == EventType.SIMULATION_COMPLETED:
            self.simulated_steps += int(event.data.get("steps", 0))

        if event.type.is_failure:
            self.errors.append({
                "timestamp": event.timestamp,
                "type": key,
                "source": event.source,
                "error": event.describe_failure(),
            })

    def export(self) -> Dict[str, Any]:
        total = sum(self.counts.values())
        return {
            "event_counts": dict(self.counts),
            "average_durations": {label: sum(v) / len(v) for label, v in self.durations.items() if v},
            "error_rate": len(self.errors) / total if total else 0.0,
            "recent_errors": self.errors[-10:],
            "levels_fitted": self.levels_fitted,
            "simulated_steps": self.simulated_steps,
        }


class EventBus:
    """Synchronous dispatch; numerical code emits from worker threads as well as the loop"""

    def __init__(self, max_log: int = 10_000):
        self.handlers: Dict[EventType, List[Handler]] = {t: [] for t in EventType}
        self.event_log: List[Event] = []
        self.metrics = EventMetrics()
        self.max_log = max_log
        self._lock = threading.Lock()

        for event_type in _FAILURES:
            self.subscribe(event_type, self._report_failure)

    def subscribe(self, event_type: EventType, handler: Handler) -> None:
        self.handlers[event_type].append(handler)

    def subscribe_all(self, handler: Handler) -> None:
        for event_type in EventType:
            self.subscribe(event_type, handler)

    def unsubscribe(self, handler: Handler) -> None:
        for event_type, handlers in self.handlers.items():
            self.handlers[event_type] = [h for h in handlers if h != handler]

    def emit(self, event: Event) -> None:
        with self._lock:
            self.event_log.append(event)
            overflow = len(self.event_log) - self.max_log
            if overflow > 0:
                del self.event_log[:overflow]
            self.metrics.record(event)
            handlers = tuple(self.handlers[event.type])

        # handlers run unlocked so they may emit in turn
        for handler in handlers:
            try:
                handler(event)
            except Exception as e:  # noqa: BLE001
                logger.error(f"Handler {getattr(handler, '__name__', handler)} failed on {event.type.value}: {e}")

    @staticmethod
    def _report_failure(event: Event) -> None:
        level = logging.WARNING if event.type == EventType.GATE_FAILED else logging.ERROR
        subject = event.data.get("task_id") or event.data.get("gate") or event.source
        logger.log(level, f"{event.type.value} [{subject}]: {event.describe_failure()}")

    def get_events_by_type(self, event_type: EventType, limit: int = 100) -> List[Event]:
        with self._lock:
            return [e for e in self.event_log if e.type == event_type][-limit:]

    def get_events_by_source(self, source: str, limit: int = 100) -> List[Event]:
        with self._lock:
            return [e for e in self.event_log if e.source == source][-limit:]

    def export_metrics(self) -> Dict[str, Any]:
        with self._lock:
            return self.metrics.export()

    def clear(self) -> None:
        with self._lock:
            self.event_log.clear()
            self.metrics = EventMetrics()


class EventLogger:
    """Appends one JSON document per event to a file (``--event-log``)"""

    def __init__(self, log_file: str = "emr_closure_events.log"):
        self.logger = logging.getLogger("emr_closure.events")
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False
        self.handler = logging.FileHandler(log_file)
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        self.logger.addHandler(self.handler)

    def log_event(self, event: Event) -> None:
        self.logger.info(event.to_json())

    def close(self) -> None:
        self.logger.removeHandler(self.handler)
        self.handler.close()


event_bus = EventBus()


def emit_event(event_type: EventType, source: str, data: Dict[str, Any],
               metadata: Optional[Dict[str, Any]] = None) -> Event:
    event = Event(str(uuid.uuid4()), event_type, datetime.now(), source, data, metadata)
    event_bus.emit(event)
    return event
