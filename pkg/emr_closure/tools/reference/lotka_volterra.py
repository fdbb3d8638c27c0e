"""
EMR Closure - Competitive Lotka-Volterra system
Four species, dN_i/dt = b_i N_i (1 - sum_j a_ij N_j), integrated with forward Euler.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np

from ...core.errors import BlowUpError, DataError
from ...core.timeseries import TimeSeries

logger = logging.getLogger(__name__)

CHAOTIC_A = (
    (1.0, 1.09, 1.52, 0.0),
    (0.0, 1.0, 0.44, 1.36),
    (2.33, 0.0, 1.0, 0.47),
    (1.21, 0.51, 0.35, 1.0),
)
CHAOTIC_B = (1.0, 0.72, 1.53, 1.27)
CHAOTIC_N0 = (0.5, 0.2, 0.3, 0.7)
SPECIES = ("N1", "N2", "N3", "N4")


@dataclass(frozen=True)
class LVParams:
    a: np.ndarray = field(default_factory=lambda: np.array(CHAOTIC_A))
    b: np.ndarray = field(default_factory=lambda: np.array(CHAOTIC_B))

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        n = b.size
        if a.shape != (n, n):
            raise DataError(f"Interaction matrix must be {n}x{n}, got {a.shape}")
        if not np.allclose(np.diag(a), 1.0):
            raise DataError("Interaction matrix must have a unit diagonal")
        if np.any(a < 0):
            raise DataError("Interaction coefficients must be non-negative")
        if np.any(b <= 0):
            raise DataError("Growth rates must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.size

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "LVParams":
        return cls(np.array(values.get("a", CHAOTIC_A)), np.array(values.get("b", CHAOTIC_B)))

    def to_dict(self) -> Dict[str, Any]:
        return {"a": self.a.tolist(), "b": self.b.tolist()}

    def rate(self, N: np.ndarray) -> np.ndarray:
        return self.b * N * (1.0 - self.a @ N)


def lv_coexistence_point(params: LVParams) -> np.ndarray:
    """Interior fixed point N* with a N* = 1"""
    try:
        return np.linalg.solve(params.a, np.ones(params.n))
    except np.linalg.LinAlgError as e:
        raise DataError(f"Interaction matrix is singular: {e}") from e


def simulate_lv(params: LVParams = LVParams(), N0: Sequence[float] = CHAOTIC_N0, dt: float = 0.035,
                steps: int = 150_000, names: Optional[Sequence[str]] = None) -> TimeSeries:
    """``steps`` samples starting at N0; extinct species (N_i = 0) stay extinct"""
    N = np.asarray(N0, dtype=float).ravel()
    if N.size != params.n:
        raise DataError(f"N0 must have {params.n} components")
    if np.any(N < 0) or not np.isfinite(N).all():
        raise DataError("N0 must be finite and non-negative")
    if not dt > 0 or steps < 2:
        raise DataError("dt must be > 0 and steps >= 2")

    out = np.empty((steps, params.n))
    out[0] = N
    b, a = params.b, params.a
    for k in range(1, steps):
        N = N + dt * b * N * (1.0 - a @ N)
        if np.any(N < 0) or not np.isfinite(N).all():
            raise BlowUpError(f"Population left the positive cone at step {k}; reduce dt", step=k)
        out[k] = N
    logger.debug(f"LV run: {steps} steps at dt={dt}")
    names = tuple(names) if names else SPECIES[:params.n] if params.n <= 4 else ()
    return TimeSeries(out, dt, names)


def lv_observed(ts: TimeSeries, transient: int = 10_000, channels: Sequence[int] = (0, 1, 2)) -> TimeSeries:
    """Drop the transient and keep the observed species"""
    if transient > ts.n - 2:
        raise DataError(f"Transient of {transient} samples leaves fewer than 2 of {ts.n}")
    return ts.slice(transient).select(list(channels))
