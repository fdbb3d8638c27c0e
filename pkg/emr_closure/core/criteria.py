"""
EMR Closure - Acceptance Gates
Evaluates pass/fail criteria of a study against the collected task results
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError
from .events import EventType, emit_event

logger = logging.getLogger(__name__)

COMPARISONS = ("<=", ">=", "==", "between", "within", "nondecreasing")


@dataclass
class Gate:
    """One criterion; ``metric`` is a dotted path into task results (or a list of them)"""

    name: str
    metric: Union[str, List[str]]
    comparison: str
    threshold: Any
    desk_threshold: Any = None
    description: str = ""

    def __post_init__(self):
        if self.comparison not in COMPARISONS:
            raise ConfigError(f"Gate {self.name!r}: comparison must be one of {COMPARISONS}")

    def threshold_for(self, scale: str) -> Any:
        if scale == "desk" and self.desk_threshold is not None:
            return self.desk_threshold
        return self.threshold

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Gate":
        try:
            return cls(
                name=raw["name"],
                metric=raw["metric"],
                comparison=raw["comparison"],
                threshold=raw.get("threshold"),
                desk_threshold=raw.get("desk_threshold"),
                description=raw.get("description", ""),
            )
        except KeyError as e:
            raise ConfigError(f"Gate definition is missing {e}") from e


@dataclass
class GateResult:
    name: str
    passed: bool
    value: Any
    threshold: Any
    comparison: str
    reason: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "comparison": self.comparison,
            "reason": self.reason,
        }


@dataclass
class CriteriaReport:
    study: str
    scale: str
    results: List[GateResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[GateResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "study": self.study,
            "scale": self.scale,
            "passed": self.passed,
            "gates": [r.to_dict() for r in self.results],
        }


def lookup(results: Dict[str, Any], path: str) -> Any:
    """Resolve 'task_id.key.subkey' (list indices allowed) against task results"""
    task_id, _, rest = path.partition(".")
    if task_id not in results:
        raise KeyError(f"no result for task {task_id!r}")
    node = results[task_id]
    for part in rest.split(".") if rest else []:
        if isinstance(node, dict):
            node = node[part]
        elif isinstance(node, (list, tuple)):
            node = node[int(part)]
        else:
            node = getattr(node, part)
    return node


def _values(value: Any) -> np.ndarray:
    return np.atleast_1d(np.asarray(value, dtype=float))


def _compare(comparison: str, value: Any, threshold: Any) -> bool:
    if comparison == "nondecreasing":
        tol = float(threshold or 0.0)
        seq = _values(value)
        return bool(np.all(np.diff(seq) >= -tol))
    values = _values(value)
    if comparison == "<=":
        return bool(np.all(values <= float(threshold)))
    if comparison == ">=":
        return bool(np.all(values >= float(threshold)))
    if comparison == "==":
        return bool(np.all(values == float(threshold)))
    if comparison == "between":
        lo, hi = threshold
        return bool(np.all((values >= float(lo)) & (values <= float(hi))))
    # within: {target: x or [x...], tolerance: t}
    target = _values(threshold["target"])
    return bool(np.all(np.abs(values - target) <= float(threshold["tolerance"])))


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class CriteriaRunner:
    """Minimal gate execution engine"""

    def __init__(self, gates: Sequence[Gate], scale: str = "desk", study: str = ""):
        self.gates = list(gates)
        self.scale = scale
        self.study = study

    @classmethod
    def from_config(cls, config: Dict[str, Any], scale: str) -> "CriteriaRunner":
        gates = [Gate.from_dict(raw) for raw in config.get("gates", [])]
        return cls(gates, scale, config.get("name", ""))

    def evaluate(self, gate: Gate, results: Dict[str, Any]) -> GateResult:
        threshold = gate.threshold_for(self.scale)
        try:
            if isinstance(gate.metric, list):
                value = [lookup(results, path) for path in gate.metric]
            else:
                value = lookup(results, gate.metric)
        except (KeyError, IndexError, AttributeError, ValueError) as e:
            return GateResult(gate.name, False, None, threshold, gate.comparison,
                              f"metric unavailable: {e}")
        value = _jsonable(value)
        try:
            passed = _compare(gate.comparison, value, threshold)
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"Gate {gate.name!r} cannot compare {value!r} with {threshold!r}: {e}") from e
        reason = "" if passed else f"{value} fails {gate.comparison} {threshold}"
        return GateResult(gate.name, passed, value, threshold, gate.comparison, reason)

    def run(self, results: Dict[str, Any], gates: Optional[Sequence[Gate]] = None) -> CriteriaReport:
        report = CriteriaReport(self.study, self.scale)
        for gate in gates or self.gates:
            outcome = self.evaluate(gate, results)
            report.results.append(outcome)
            if outcome.passed:
                emit_event(EventType.GATE_PASSED, "criteria", {"gate": gate.name, "value": outcome.value})
            else:
                emit_event(EventType.GATE_FAILED, "criteria", {"gate": gate.name, "reason": outcome.reason})
        logger.info(f"{self.study}: {sum(r.passed for r in report.results)}/{len(report.results)} gates passed")
        return report
