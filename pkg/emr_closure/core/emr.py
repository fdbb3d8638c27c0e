"""
EMR Closure - Multilevel model fitting
Quadratic main level, recursive linear hidden levels, the whiteness stopping test,
last-level noise estimation, and audits of a fitted model.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import yaml

from .config import StoppingConfig
from .errors import (ConfigError, ConvergenceError, DataError, ModelError,
                     NoiseEstimationError)
from .events import EventType, emit_event
from .regression import (ConstraintSet, LsSolution, build_level_design,
                         build_quadratic_design, constrained_least_squares,
                         energy_constraints, least_squares, monomial_pairs,
                         n_quadratic_columns, quadratic_monomials, resolve_ridge)
from .timeseries import TimeSeries, lag1_autocorrelation

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "emr-closure/model"
MODEL_VERSION = 1
SIGN_CONVENTION = "dx/dt = F - A x + B(x,x) + r0"
MIN_STOPPING_SAMPLES = 100
NOISE_JITTER = 1e-12

Ridge = Union[str, float, None]
Constraints = Union[str, ConstraintSet, None]


@dataclass(frozen=True)
class QuadraticMainLevel:
    """Drift F - A x + B(x,x); B holds one coefficient per monomial x_i x_j (i <= j) per channel"""

    F: np.ndarray
    A: np.ndarray
    B: np.ndarray
    constrained: bool = False

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float).ravel()
        d = F.size
        A = np.asarray(self.A, dtype=float).reshape(d, d)
        n_mono = d * (d + 1) // 2
        B = np.asarray(self.B, dtype=float)
        B = np.zeros((d, n_mono)) if B.size == 0 else B.reshape(d, n_mono)
        for name, value in (("F", F), ("A", A), ("B", B)):
            if not np.isfinite(value).all():
                raise ModelError(f"Main level {name} has non-finite entries")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.F.size

    @classmethod
    def from_coefficients(cls, theta: np.ndarray, d: int, has_constant: bool = True,
                          quadratic: bool = True, constrained: bool = False) -> "QuadraticMainLevel":
        """Unpack an M x d regression solution with columns [1, x, x_i x_j]"""
        offset = 1 if has_constant else 0
        F = theta[0] if has_constant else np.zeros(d)
        A = -theta[offset:offset + d].T
        if quadratic:
            B = theta[offset + d:offset + d + d * (d + 1) // 2].T
        else:
            B = np.zeros((d, d * (d + 1) // 2))
        return cls(F, A, B, constrained)

    @classmethod
    def from_tensor(cls, F: np.ndarray, A: np.ndarray, T: np.ndarray) -> "QuadraticMainLevel":
        """Build from a full tensor T[i, j, k] with B_i(x,x) = sum_jk T[i,j,k] x_j x_k"""
        T = np.asarray(T, dtype=float)
        d = T.shape[0]
        B = np.zeros((d, d * (d + 1) // 2))
        for col, (j, k) in enumerate(monomial_pairs(d)):
            B[:, col] = T[:, j, k] if j == k else T[:, j, k] + T[:, k, j]
        return cls(F, A, B)

    def to_coefficients(self) -> np.ndarray:
        """Inverse of from_coefficients for the full quadratic layout"""
        return np.vstack([self.F[None, :], -self.A.T, self.B.T])

    def to_grand_vector(self) -> np.ndarray:
        return self.to_coefficients().T.ravel()

    def quadratic_term(self, x: np.ndarray) -> np.ndarray:
        return quadratic_monomials(x, self.d) @ self.B.T

    def drift(self, x: np.ndarray) -> np.ndarray:
        """F - A x + B(x,x) for one state or a batch of row states"""
        x = np.asarray(x, dtype=float)
        return self.F - x @ self.A.T + self.quadratic_term(x)

    def cubic_form(self, x: np.ndarray) -> np.ndarray:
        """<B(x,x), x>"""
        x = np.asarray(x, dtype=float)
        return np.sum(self.quadratic_term(x) * x, axis=-1)


@dataclass(frozen=True)
class LevelOperator:
    """Hidden level m: dr(m-1)/dt = L [x, r(0), ..., r(m-1)] + r(m)"""

    level: int
    L: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        if self.level < 1:
            raise ModelError(f"Level index must be >= 1, got {self.level}")
        if L.ndim != 2 or L.shape[1] != (self.level + 1) * L.shape[0]:
            raise ModelError(f"Level {self.level} operator must be d x {self.level + 1}d, got {L.shape}")
        object.__setattr__(self, "L", L)

    @property
    def d(self) -> int:
        return self.L.shape[0]

    def block(self, j: int) -> np.ndarray:
        """Coupling to the j-th stacked variable (0 = x, j = r(j-1))"""
        d = self.d
        return self.L[:, j * d:(j + 1) * d]

    @property
    def self_block(self) -> np.ndarray:
        return self.block(self.level)


@dataclass(frozen=True)
class NoiseSpec:
    Q: np.ndarray
    factor: np.ndarray

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.factor)


@dataclass(frozen=True)
class LevelDiagnostics:
    level: int
    n_samples: int
    lag1: Tuple[float, ...]
    trial_r2: Tuple[float, ...]
    cov_eigenvalues: Tuple[float, ...]
    cov_change: Optional[float]
    lag1_ok: bool
    r2_ok: bool
    cov_ok: bool

    @property
    def passed(self) -> bool:
        return self.lag1_ok and self.r2_ok and self.cov_ok

    def to_dict(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "n_samples": self.n_samples,
            "lag1": list(self.lag1),
            "trial_r2": list(self.trial_r2),
            "cov_eigenvalues": list(self.cov_eigenvalues),
            "cov_change": self.cov_change,
            "lag1_ok": self.lag1_ok,
            "r2_ok": self.r2_ok,
            "cov_ok": self.cov_ok,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "LevelDiagnostics":
        return cls(
            level=int(raw["level"]),
            n_samples=int(raw["n_samples"]),
            lag1=tuple(raw["lag1"]),
            trial_r2=tuple(raw["trial_r2"]),
            cov_eigenvalues=tuple(raw["cov_eigenvalues"]),
            cov_change=raw.get("cov_change"),
            lag1_ok=bool(raw["lag1_ok"]),
            r2_ok=bool(raw["r2_ok"]),
            cov_ok=bool(raw["cov_ok"]),
        )


@dataclass(frozen=True)
class FitReport:
    levels: Tuple[LevelDiagnostics, ...] = ()
    stop_reason: str = ""
    main_r2: Tuple[float, ...] = ()
    level_r2: Tuple[Tuple[float, ...], ...] = ()
    constraints: str = "none"
    ridge: Tuple[float, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stop_reason": self.stop_reason,
            "constraints": self.constraints,
            "main_r2": list(self.main_r2),
            "level_r2": [list(r) for r in self.level_r2],
            "ridge": list(self.ridge),
            "levels": [diag.to_dict() for diag in self.levels],
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "FitReport":
        return cls(
            levels=tuple(LevelDiagnostics.from_dict(item) for item in raw.get("levels", [])),
            stop_reason=raw.get("stop_reason", ""),
            main_r2=tuple(raw.get("main_r2", [])),
            level_r2=tuple(tuple(r) for r in raw.get("level_r2", [])),
            constraints=raw.get("constraints", "none"),
            ridge=tuple(raw.get("ridge", [])),
        )


@dataclass(frozen=True)
class EMRModel:
    main: QuadraticMainLevel
    levels: Tuple[LevelOperator, ...]
    noise: NoiseSpec
    dt: float
    report: FitReport = field(default_factory=FitReport)
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        for m, op in enumerate(self.levels, start=1):
            if op.level != m:
                raise ModelError(f"levels[{m - 1}] has level index {op.level}, expected {m}")
            if op.d != self.d:
                raise ModelError(f"Level {m} operator has d={op.d}, main level has d={self.d}")
        if self.noise.Q.shape != (self.d, self.d):
            raise ModelError(f"Noise covariance shape {self.noise.Q.shape} does not match d={self.d}")
        if not self.dt > 0:
            raise ModelError("Model dt must be positive")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i + 1}" for i in range(self.d)))

    @property
    def d(self) -> int:
        return self.main.d

    @property
    def p(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class GrandOperator:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    labels: Tuple[str, ...]

    @property
    def n_unstable(self) -> int:
        return int(np.sum(self.eigenvalues.real > 0))


@dataclass(frozen=True)
class EnergyAudit:
    cubic_form_max: float
    equality_violation: float
    min_diag_A: float
    n_samples: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "cubic_form_max": self.cubic_form_max,
            "equality_violation": self.equality_violation,
            "min_diag_A": self.min_diag_A,
            "n_samples": self.n_samples,
        }


def _state_array(ts: Union[TimeSeries, np.ndarray]) -> np.ndarray:
    data = ts.data if isinstance(ts, TimeSeries) else np.asarray(ts, dtype=float)
    return data[:, None] if data.ndim == 1 else data


def _resolve_constraints(constraints: Constraints, d: int) -> Optional[ConstraintSet]:
    if constraints is None or constraints == "none":
        return None
    if constraints == "energy":
        return energy_constraints(d)
    if isinstance(constraints, ConstraintSet):
        return constraints
    raise ConfigError(f"Unknown constraint mode {constraints!r}; use 'none' or 'energy'")


def fit_main_level(ts: TimeSeries, constraints: Constraints = None, ridge: Ridge = 0.0,
                   quadratic: bool = True) -> Tuple[QuadraticMainLevel, np.ndarray, LsSolution]:
    """Regress dx/dt on [1, x, x_i x_j]; returns the level, r(0) (length N-1) and the raw solution"""
    x = ts.data
    d = ts.d
    n_cols = n_quadratic_columns(d) if quadratic else 1 + d
    if ts.n < 2 * n_cols:
        raise DataError(f"Main-level fit needs N >= {2 * n_cols} samples, got {ts.n}")
    constraint_set = _resolve_constraints(constraints, d)
    if constraint_set is not None and not quadratic:
        raise ConfigError("Energy constraints require the quadratic main level")

    design = build_quadratic_design(x[:-1], names=ts.names, constant=True, quadratic=quadratic)
    targets = np.diff(x, axis=0) / ts.dt
    lam = resolve_ridge(ridge, design)
    if constraint_set is None:
        solution = least_squares(design, targets, lam)
    else:
        solution = constrained_least_squares(design, targets, constraint_set, lam)

    main = QuadraticMainLevel.from_coefficients(
        solution.coefficients, d, has_constant=True, quadratic=quadratic,
        constrained=constraint_set is not None)
    logger.debug(f"Main level fitted: R2={np.round(solution.r_squared, 4).tolist()}, lambda={lam:.3g}")
    return main, solution.residuals, solution


def fit_level(m: int, ts: Union[TimeSeries, np.ndarray], residual_stack: Sequence[np.ndarray],
              dt: Optional[float] = None, ridge: Ridge = 0.0) -> Tuple[LevelOperator, np.ndarray, LsSolution]:
    """Regress dr(m-1)/dt on [x, r(0), ..., r(m-1)] over their common length"""
    if m < 1:
        raise DataError(f"Hidden level index must be >= 1, got {m}")
    if len(residual_stack) != m:
        raise DataError(f"Level {m} needs residuals r(0)..r({m - 1}), got {len(residual_stack)}")
    if dt is None:
        if not isinstance(ts, TimeSeries):
            raise DataError("dt is required when ts is a raw array")
        dt = ts.dt
    x = _state_array(ts)
    stack = [_state_array(r) for r in residual_stack]
    previous = stack[-1]
    length = previous.shape[0] - 1
    if length < 1:
        raise DataError(f"Residual r({m - 1}) is too short for a level-{m} fit")
    for j, block in enumerate([x, *stack]):
        if block.shape[1] != x.shape[1]:
            raise DataError(f"Stack entry {j} has {block.shape[1]} channels, expected {x.shape[1]}")
        if block.shape[0] < previous.shape[0]:
            raise DataError(f"Stack entry {j} has {block.shape[0]} rows, shorter than r({m - 1})")

    design = build_level_design(x[:length], [r[:length] for r in stack])
    targets = np.diff(previous, axis=0) / dt
    lam = resolve_ridge(ridge, design)
    solution = least_squares(design, targets, lam)
    return LevelOperator(m, solution.coefficients.T), solution.residuals, solution


def stopping_test(residual: np.ndarray, predictors: Sequence[np.ndarray] = (), dt: float = 1.0,
                  config: StoppingConfig = StoppingConfig(), level: int = 0,
                  previous_eigenvalues: Optional[Sequence[float]] = None,
                  ridge: Ridge = 0.0) -> Tuple[bool, LevelDiagnostics]:
    """Whiteness test on the level-m residual.

    Passes when every channel has a small lag-1 autocorrelation, a trial next-level
    regression explains about half of the differenced residual, and the covariance of the
    unit-step residual r(m) * dt^(m+1) has settled relative to the previous level.
    """
    r = _state_array(residual)
    n = r.shape[0]
    if n < MIN_STOPPING_SAMPLES:
        raise DataError(f"Stopping test needs at least {MIN_STOPPING_SAMPLES} residual samples, got {n}")

    lag1 = lag1_autocorrelation(r)

    length = n - 1
    blocks = [_state_array(p) for p in predictors]
    for j, block in enumerate(blocks):
        if block.shape[0] < n:
            raise DataError(f"Predictor {j} has {block.shape[0]} rows, residual has {n}")
    design = build_level_design(blocks[0][:length], [b[:length] for b in blocks[1:]] + [r[:length]]) \
        if blocks else build_quadratic_design(r[:length], constant=False, quadratic=False)
    trial = least_squares(design, np.diff(r, axis=0) / dt, resolve_ridge(ridge, design))
    trial_r2 = trial.r_squared

    scaled = r * dt ** (level + 1)
    cov = np.atleast_2d(np.cov(scaled, rowvar=False))
    eigenvalues = np.sort(np.linalg.eigvalsh(cov))
    if previous_eigenvalues is None:
        change = None
        cov_ok = True
    else:
        prev = np.asarray(previous_eigenvalues, dtype=float)
        scale = np.linalg.norm(prev)
        change = float(np.linalg.norm(eigenvalues - prev) / scale) if scale > 0 else float("inf")
        cov_ok = change <= config.covariance_tolerance

    lag1_ok = bool(np.all(np.abs(lag1) <= config.lag1_tolerance))
    r2_ok = bool(np.all(np.abs(trial_r2 - config.r2_target) <= config.r2_tolerance))
    diagnostics = LevelDiagnostics(
        level=level,
        n_samples=n,
        lag1=tuple(float(v) for v in lag1),
        trial_r2=tuple(float(v) for v in trial_r2),
        cov_eigenvalues=tuple(float(v) for v in eigenvalues),
        cov_change=change,
        lag1_ok=lag1_ok,
        r2_ok=r2_ok,
        cov_ok=cov_ok,
    )
    return diagnostics.passed, diagnostics


def estimate_noise(residual: np.ndarray, dt: float) -> NoiseSpec:
    """Q = cov(r(p) * sqrt(dt)) with a lower Cholesky factor"""
    r = _state_array(residual)
    if r.shape[0] < 2:
        raise DataError("Noise estimation needs at least 2 residual samples")
    scaled = r * np.sqrt(dt)
    Q = np.atleast_2d(np.cov(scaled, rowvar=False))
    Q = 0.5 * (Q + Q.T)
    if not np.any(Q):
        return NoiseSpec(Q, np.zeros_like(Q))
    try:
        factor = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        jitter = NOISE_JITTER * max(1.0, float(np.max(np.diag(Q))))
        try:
            factor = np.linalg.cholesky(Q + jitter * np.eye(Q.shape[0]))
        except np.linalg.LinAlgError as e:
            raise NoiseEstimationError(f"Noise covariance is not positive semidefinite: {e}") from e
        logger.debug(f"Noise covariance needed jitter {jitter:.1e}")
    return NoiseSpec(Q, factor)


def fit_emr(ts: TimeSeries, constraints: Constraints = None, ridge: Ridge = "auto",
            stopping: StoppingConfig = StoppingConfig(), n_levels: Optional[int] = None,
            quadratic: bool = True, source: str = "emr.fit") -> EMRModel:
    """Fit the main level, then add hidden levels until the last residual is white.

    ``n_levels`` forces exactly that many hidden levels; stopping diagnostics are still
    recorded for every level.
    """
    if n_levels is not None and n_levels < 0:
        raise ConfigError("n_levels must be >= 0")
    mode = "none" if constraints is None else constraints if isinstance(constraints, str) else "custom"

    main, r0, main_solution = fit_main_level(ts, constraints, ridge, quadratic)
    emit_event(EventType.LEVEL_FITTED, source, {
        "level": 0, "r2": main_solution.r_squared.tolist(), "ridge": main_solution.ridge_lambda,
    })

    x = ts.data
    stack: List[np.ndarray] = [r0]
    levels: List[LevelOperator] = []
    diagnostics: List[LevelDiagnostics] = []
    level_r2: List[Tuple[float, ...]] = []
    ridges = [main_solution.ridge_lambda]
    previous_eigenvalues = None
    m = 0
    while True:
        residual = stack[-1]
        stop, diag = stopping_test(residual, [x, *stack[:-1]], ts.dt, stopping, level=m,
                                   previous_eigenvalues=previous_eigenvalues, ridge=ridge)
        diagnostics.append(diag)
        previous_eigenvalues = diag.cov_eigenvalues
        emit_event(EventType.STOPPING_CHECKED, source, diag.to_dict())

        if n_levels is not None:
            if m == n_levels:
                stop_reason = "fixed_levels"
                break
        elif stop:
            stop_reason = "criteria_met"
            break
        elif m >= stopping.max_levels:
            stop_reason = "max_levels"
            break

        m += 1
        operator, r_m, solution = fit_level(m, x, stack, ts.dt, ridge)
        levels.append(operator)
        stack.append(r_m)
        level_r2.append(tuple(float(v) for v in solution.r_squared))
        ridges.append(solution.ridge_lambda)
        emit_event(EventType.LEVEL_FITTED, source, {
            "level": m, "r2": solution.r_squared.tolist(), "ridge": solution.ridge_lambda,
        })

    noise = estimate_noise(stack[-1], ts.dt)
    report = FitReport(
        levels=tuple(diagnostics),
        stop_reason=stop_reason,
        main_r2=tuple(float(v) for v in main_solution.r_squared),
        level_r2=tuple(level_r2),
        constraints=mode,
        ridge=tuple(ridges),
    )
    model = EMRModel(main, tuple(levels), noise, ts.dt, report, ts.names)
    logger.info(f"EMR fit: p={model.p} ({stop_reason}), constraints={mode}")
    emit_event(EventType.FIT_COMPLETED, source, {"p": model.p, "stop_reason": stop_reason, "d": model.d})
    return model


def grand_linear_operator(model: EMRModel) -> GrandOperator:
    """Linear dynamics of the stacked state (x, r(0), ..., r(p-1)), eigenvalues sorted by real part"""
    d, p = model.d, model.p
    size = d * (p + 1)
    G = np.zeros((size, size))
    G[:d, :d] = -model.main.A
    if p >= 1:
        G[:d, d:2 * d] = np.eye(d)
    for op in model.levels:
        m = op.level
        rows = slice(m * d, (m + 1) * d)
        G[rows, :(m + 1) * d] = op.L
        if m < p:
            G[rows, (m + 1) * d:(m + 2) * d] = np.eye(d)

    try:
        eigenvalues = scipy.linalg.eigvals(G)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"Eigenvalue iteration did not converge for the {size}x{size} operator") from e
    order = np.lexsort((eigenvalues.imag, eigenvalues.real))
    labels = tuple(model.names) + tuple(
        f"r{m}_{name}" for m in range(p) for name in model.names)
    return GrandOperator(G, eigenvalues[order], labels)


def energy_audit(main: QuadraticMainLevel, n_samples: int = 1000, seed: int = 0) -> EnergyAudit:
    """Cubic-form bound over random unit states plus constraint residuals"""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_samples, main.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cubic = float(np.max(np.abs(main.cubic_form(u))))
    violation = energy_constraints(main.d).max_equality_violation(main.to_grand_vector())
    return EnergyAudit(
        cubic_form_max=cubic,
        equality_violation=violation,
        min_diag_A=float(np.min(np.diag(main.A))),
        n_samples=n_samples,
    )


def reconstruct_residuals(model: EMRModel, ts: Union[TimeSeries, np.ndarray],
                          depth: Optional[int] = None) -> List[np.ndarray]:
    """Replay the level recurrences on data: [r(0), ..., r(depth)], r(m) of length N-1-m.

    ``depth`` defaults to p, which includes the last-level (noise) residual.
    """
    x = _state_array(ts)
    depth = model.p if depth is None else depth
    if x.shape[1] != model.d:
        raise DataError(f"Data has {x.shape[1]} channels, model has {model.d}")
    if not 0 <= depth <= model.p:
        raise DataError(f"Residual depth must be in [0, {model.p}], got {depth}")
    if x.shape[0] < depth + 2:
        raise DataError(f"Reconstructing r({depth}) needs at least {depth + 2} samples, got {x.shape[0]}")
    dt = model.dt
    residuals = [np.diff(x, axis=0) / dt - model.main.drift(x[:-1])]
    for op in model.levels[:depth]:
        previous = residuals[-1]
        length = previous.shape[0] - 1
        stacked = np.hstack([x[:length]] + [r[:length] for r in residuals])
        residuals.append(np.diff(previous, axis=0) / dt - stacked @ op.L.T)
    return residuals


def _matrix(values: np.ndarray) -> List[List[float]]:
    return np.atleast_2d(values).tolist()


def model_to_dict(model: EMRModel) -> Dict[str, Any]:
    return {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "sign_convention": SIGN_CONVENTION,
        "d": model.d,
        "p": model.p,
        "dt": model.dt,
        "names": list(model.names),
        "monomials": [[i, j] for i, j in monomial_pairs(model.d)],
        "main": {
            "F": model.main.F.tolist(),
            "A": _matrix(model.main.A),
            "B": _matrix(model.main.B),
            "constrained": model.main.constrained,
        },
        "levels": [{"level": op.level, "L": _matrix(op.L)} for op in model.levels],
        "noise": {"Q": _matrix(model.noise.Q), "factor": _matrix(model.noise.factor)},
        "report": model.report.to_dict(),
    }


def model_from_dict(raw: Dict[str, Any]) -> EMRModel:
    if raw.get("schema") != MODEL_SCHEMA:
        raise ModelError(f"Not an EMR model document (schema={raw.get('schema')!r})")
    if int(raw.get("version", 0)) > MODEL_VERSION:
        raise ModelError(f"Model version {raw.get('version')} is newer than supported ({MODEL_VERSION})")
    if raw.get("sign_convention") != SIGN_CONVENTION:
        raise ModelError(f"Unsupported sign convention {raw.get('sign_convention')!r}")
    try:
        d = int(raw["d"])
        main_raw = raw["main"]
        main = QuadraticMainLevel(
            np.array(main_raw["F"], dtype=float),
            np.array(main_raw["A"], dtype=float),
            np.array(main_raw["B"], dtype=float),
            bool(main_raw.get("constrained", False)),
        )
        levels = tuple(LevelOperator(int(item["level"]), np.array(item["L"], dtype=float))
                       for item in raw.get("levels", []))
        noise = NoiseSpec(np.array(raw["noise"]["Q"], dtype=float).reshape(d, d),
                          np.array(raw["noise"]["factor"], dtype=float).reshape(d, d))
        model = EMRModel(main, levels, noise, float(raw["dt"]),
                         FitReport.from_dict(raw.get("report", {})), tuple(raw.get("names", ())))
    except (KeyError, TypeError, ValueError) as e:
        raise ModelError(f"Malformed model document: {e}") from e
    if model.p != int(raw.get("p", model.p)):
        raise ModelError(f"Model declares p={raw['p']} but holds {model.p} levels")
    return model


def save_model(model: EMRModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(model_to_dict(model), f, sort_keys=False, default_flow_style=None, width=120)
    return path


def load_model(path: Union[str, Path]) -> EMRModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Model file not found: {path}")
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ModelError(f"Malformed model file {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ModelError(f"{path} does not hold a model document")
    return model_from_dict(raw)
