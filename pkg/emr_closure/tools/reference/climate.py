"""
EMR Closure - Conceptual stochastic climate model
Two slow modes (x1, x2) coupled linearly and through energy-conserving triads to two
fast, damped and noise-driven modes (y1, y2); eps sets the time-scale separation.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ...core.errors import BlowUpError, DataError
from ...core.simulate import member_generator
from ...core.timeseries import TimeSeries

logger = logging.getLogger(__name__)

FULL_NAMES = ("x1", "x2", "y1", "y2")
SCHEMES = ("rk4-em", "euler-maruyama")
BLOWUP_BOUND = 1e10
NOISE_CHUNK = 65536


@dataclass(frozen=True)
class ClimateParams:
    b123: float = 0.25
    b213: float = 0.25
    b312: float = -0.5
    c134: float = 0.25
    c341: float = 0.25
    c413: float = -0.5
    L12: float = 1.0
    L21: float = 1.0
    L24: float = 1.0
    L13: float = -1.0
    a1: float = 1.0
    a2: float = -1.0
    d1: float = 0.2
    d2: float = 0.1
    F: Tuple[float, float, float, float] = (-0.25, 0.0, 0.0, 0.0)
    gamma: Tuple[float, float] = (1.0, 1.0)
    sigma: Tuple[float, float] = (1.0, 1.0)
    eps: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "F", tuple(float(v) for v in self.F))
        object.__setattr__(self, "gamma", tuple(float(v) for v in self.gamma))
        object.__setattr__(self, "sigma", tuple(float(v) for v in self.sigma))
        if len(self.F) != 4 or len(self.gamma) != 2 or len(self.sigma) != 2:
            raise DataError("Climate params need 4 forcings, 2 damping rates and 2 noise amplitudes")
        if not self.eps > 0:
            raise DataError("eps must be > 0")
        if any(g <= 0 for g in self.gamma):
            raise DataError("gamma values must be > 0")
        if any(s < 0 for s in self.sigma):
            raise DataError("sigma values must be >= 0")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ClimateParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise DataError(f"Unknown climate parameters: {sorted(unknown)}")
        return cls(**dict(values))

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in raw.items()}

    def with_eps(self, eps: float) -> "ClimateParams":
        return ClimateParams(**{**asdict(self), "eps": eps})


def climate_drift(params: ClimateParams, x1: float, x2: float, y1: float, y2: float):
    p = params
    inv_eps = 1.0 / p.eps
    dx1 = (-x2 * (p.L12 + p.a1 * x1 + p.a2 * x2) - p.d1 * x1 + p.F[0]
           + p.L13 * y1 + p.b123 * x2 * y1 + p.c134 * y1 * y2)
    dx2 = (x1 * (p.L21 + p.a1 * x1 + p.a2 * x2) - p.d2 * x2 + p.F[1]
           + p.L24 * y2 + p.b213 * x1 * y1)
    dy1 = (-p.L13 * x1 + p.b312 * x1 * x2 + p.c341 * y2 * x1 + p.F[2]
           - p.gamma[0] * inv_eps * y1)
    dy2 = -p.L24 * x2 + p.c413 * y1 * x1 + p.F[3] - p.gamma[1] * inv_eps * y2
    return dx1, dx2, dy1, dy2


def climate_cubic_form(params: ClimateParams, u: np.ndarray) -> np.ndarray:
    """<B(u,u), u> of the quadratic part alone, for one state or a batch of rows"""
    p = params
    u = np.asarray(u, dtype=float)
    x1, x2, y1, y2 = (u[..., i] for i in range(4))
    q1 = -x2 * (p.a1 * x1 + p.a2 * x2) + p.b123 * x2 * y1 + p.c134 * y1 * y2
    q2 = x1 * (p.a1 * x1 + p.a2 * x2) + p.b213 * x1 * y1
    q3 = p.b312 * x1 * x2 + p.c341 * y2 * x1
    q4 = p.c413 * y1 * x1
    return q1 * x1 + q2 * x2 + q3 * y1 + q4 * y2


CLIMATE_STATES = ("x1", "x2", "y1", "y2")


def climate_linear_operator(params: ClimateParams) -> np.ndarray:
    """Linear part of the drift, read off its odd part at the unit states"""
    L = np.empty((4, 4))
    for j, unit in enumerate(np.eye(4)):
        L[:, j] = 0.5 * (np.array(climate_drift(params, *unit)) - np.array(climate_drift(params, *(-unit))))
    return L


def climate_energy_check(params: ClimateParams, tol: float = 1e-12) -> Tuple[bool, Dict[str, float]]:
    """Triad sums plus L_ij + L_ji for every off-diagonal pair of the linear operator"""
    p = params
    residuals = {
        "triad_b": p.b123 + p.b213 + p.b312,
        "triad_c": p.c134 + p.c341 + p.c413,
    }
    L = climate_linear_operator(params)
    for i, j in zip(*np.triu_indices(4, k=1)):
        residuals[f"skew_{CLIMATE_STATES[i]}_{CLIMATE_STATES[j]}"] = float(L[i, j] + L[j, i])
    ok = all(abs(v) <= tol for v in residuals.values())
    return ok, residuals


def _rk4(params: ClimateParams, u, h: float):
    x1, x2, y1, y2 = u
    k1 = climate_drift(params, x1, x2, y1, y2)
    k2 = climate_drift(params, x1 + 0.5 * h * k1[0], x2 + 0.5 * h * k1[1],
                       y1 + 0.5 * h * k1[2], y2 + 0.5 * h * k1[3])
    k3 = climate_drift(params, x1 + 0.5 * h * k2[0], x2 + 0.5 * h * k2[1],
                       y1 + 0.5 * h * k2[2], y2 + 0.5 * h * k2[3])
    k4 = climate_drift(params, x1 + h * k3[0], x2 + h * k3[1], y1 + h * k3[2], y2 + h * k3[3])
    w = h / 6.0
    return (x1 + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            x2 + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            y1 + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
            y2 + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]))


def _euler(params: ClimateParams, u, h: float):
    d = climate_drift(params, *u)
    return tuple(v + h * dv for v, dv in zip(u, d))


def simulate_climate(params: ClimateParams = ClimateParams(), duration: float = 1e4, dt: float = 1e-3,
                     sample_dt: float = 0.05, seed: int = 0, scheme: str = "rk4-em",
                     u0: Optional[Sequence[float]] = None) -> Tuple[TimeSeries, TimeSeries]:
    """Deterministic step (RK4 or Euler) followed by an Euler-Maruyama kick sigma/sqrt(eps)*sqrt(dt)*xi
    on the fast modes; returns the full 4-channel record and the observed (x1, x2) record."""
    if scheme not in SCHEMES:
        raise DataError(f"Unknown climate scheme {scheme!r}; use one of {SCHEMES}")
    if not (dt > 0 and duration > 0 and sample_dt > 0):
        raise DataError("duration, dt and sample_dt must be > 0")
    ratio = sample_dt / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise DataError(f"sample_dt={sample_dt} is not an integer multiple of dt={dt}")
    steps = int(round(duration / dt))
    if steps < stride:
        raise DataError(f"duration={duration} holds fewer than two samples at sample_dt={sample_dt}")

    advance = _rk4 if scheme == "rk4-em" else _euler
    kick = [s / math.sqrt(params.eps) * math.sqrt(dt) for s in params.sigma]
    stochastic = any(kick)
    rng = member_generator(seed)
    u = tuple(float(v) for v in (u0 if u0 is not None else (0.0, 0.0, 0.0, 0.0)))
    if len(u) != 4:
        raise DataError("u0 must have 4 components")

    records = [u]
    logger.info(f"Climate run: eps={params.eps}, {steps} steps ({scheme}), seed={seed}")
    done = 0
    while done < steps:
        size = min(NOISE_CHUNK, steps - done)
        noise = rng.standard_normal((size, 2)).tolist() if stochastic else None
        for i in range(size):
            x1, x2, y1, y2 = advance(params, u, dt)
            if stochastic:
                y1 += kick[0] * noise[i][0]
                y2 += kick[1] * noise[i][1]
            u = (x1, x2, y1, y2)
            step = done + i + 1
            # NaN fails the comparison as well
            if not abs(x1) + abs(x2) + abs(y1) + abs(y2) < BLOWUP_BOUND:
                raise BlowUpError(f"Climate model diverged at step {step}", step=step)
            if step % stride == 0:
                records.append(u)
        done += size

    full = TimeSeries(np.array(records), dt * stride, FULL_NAMES)
    return full, full.select([0, 1])
