"""
EMR Closure - Two-variable linear toy
Slow x driven by a fast noisy y, d(x, y) = M (x, y) dt + (0, sigma dW), with its
similarity transform to the (x, r) form where the hidden variable is orthogonal to x.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Sequence

import numpy as np
import scipy.linalg

from ...core.errors import DataError, ModelError
from ...core.simulate import member_generator
from ...core.timeseries import TimeSeries

logger = logging.getLogger(__name__)

NOISE_CHUNK = 65536


@dataclass(frozen=True)
class LinearToyParams:
    a: float = -2.0
    q: float = 1.0
    A: float = -1.0
    sigma: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.a, self.q, self.A, self.sigma)):
            raise DataError("Linear toy parameters must be finite")
        if self.sigma < 0:
            raise DataError("sigma must be >= 0")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "LinearToyParams":
        return cls(**{k: float(v) for k, v in values.items()})

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, 1.0], [self.q, self.A]])


@dataclass(frozen=True)
class TransformedLinearModel:
    original: np.ndarray
    similarity: np.ndarray
    transformed: np.ndarray
    residual: float

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.sort(np.linalg.eigvals(self.transformed).real)


def simulate_linear_toy(params: LinearToyParams = LinearToyParams(), dt: float = 1e-3,
                        steps: int = 1_000_000, seed: int = 0,
                        x0: Sequence[float] = (0.0, 0.0)) -> TimeSeries:
    """Euler-Maruyama recursion; sample k is the state after k steps"""
    if not dt > 0 or steps < 2:
        raise DataError("dt must be > 0 and steps >= 2")
    a, q, A = params.a, params.q, params.A
    kick = params.sigma * math.sqrt(dt)
    rng = member_generator(seed)
    x, y = (float(v) for v in x0)

    out = np.empty((steps, 2))
    out[0] = (x, y)
    k = 1
    while k < steps:
        size = min(NOISE_CHUNK, steps - k)
        noise = rng.standard_normal(size).tolist() if kick else [0.0] * size
        for xi in noise:
            x, y = x + dt * (a * x + y), y + dt * (q * x + A * y) + kick * xi
            out[k] = (x, y)
            k += 1
    return TimeSeries(out, dt, ("x", "y"))


def transformed_linear_model(params: LinearToyParams = LinearToyParams(), tol: float = 1e-12) -> TransformedLinearModel:
    """S^-1 M S with S = [[1, 0], [-a, 1]], checked against [[0, 1], [q - A a, a + A]]"""
    M = params.matrix
    S = np.array([[1.0, 0.0], [-params.a, 1.0]])
    expected = np.array([[0.0, 1.0], [params.q - params.A * params.a, params.a + params.A]])
    transformed = np.linalg.solve(S, M @ S)
    residual = float(np.max(np.abs(transformed - expected)))
    if residual > tol * max(1.0, float(np.max(np.abs(M)))):
        raise ModelError(f"Similarity transform mismatch: {residual:.3e}")
    return TransformedLinearModel(M, S, expected, residual)


def linear_toy_stationary_covariance(params: LinearToyParams = LinearToyParams(),
                                     dt: float = 1e-3) -> np.ndarray:
    """Stationary covariance of the discrete recursion: P = Phi P Phi^T + diag(0, sigma^2 dt)"""
    phi = np.eye(2) + dt * params.matrix
    if np.max(np.abs(np.linalg.eigvals(phi))) >= 1.0:
        raise ModelError("Discrete linear toy is not stable at this dt")
    noise = np.diag([0.0, params.sigma ** 2 * dt])
    return scipy.linalg.solve_discrete_lyapunov(phi, noise)


def linear_toy_acf(params: LinearToyParams, lag_times: np.ndarray) -> np.ndarray:
    """Analytic autocorrelation of x for the continuous process"""
    M = params.matrix
    P = scipy.linalg.solve_continuous_lyapunov(M, -np.diag([0.0, params.sigma ** 2]))
    values = np.array([(scipy.linalg.expm(M * tau) @ P)[0, 0] for tau in np.atleast_1d(lag_times)])
    return values / P[0, 0]
