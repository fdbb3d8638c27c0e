"""
EMR Closure - Model simulation
Euler stepping of a fitted multilevel model (free or reflected onto N_i >= eps),
backward initialization of hidden levels, ensemble forecasts, and the noise-forcing
cascade used by the eta-test.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .emr import EMRModel, grand_linear_operator, reconstruct_residuals
from .errors import BlowUpError, DataError, ModelError
from .events import EventType, emit_event
from .timeseries import TimeSeries, pearson, write_samples

logger = logging.getLogger(__name__)

NOISE_CHUNK = 65536


@dataclass(frozen=True)
class SimConfig:
    steps: int
    dt: Optional[float] = None
    seed: int = 0
    sample_stride: int = 1
    burn_in: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise DataError("dt must be > 0")
        if self.sample_stride < 1:
            raise DataError("sample_stride must be >= 1")
        if not 0 <= self.burn_in <= self.steps:
            raise DataError(f"burn_in must be in [0, {self.steps}]")
        if self.records < 2:
            raise DataError(f"steps={self.steps}, burn_in={self.burn_in}, sample_stride={self.sample_stride} "
                            f"record {self.records} sample; a trajectory needs at least 2")
        if self.seed < 0:
            raise DataError("seed must be non-negative")

    @property
    def records(self) -> int:
        return 1 + (self.steps - self.burn_in) // self.sample_stride


@dataclass(frozen=True)
class ReflectionSpec:
    enabled: bool = False
    epsilon: float = 0.0

    def __post_init__(self):
        if self.enabled and not self.epsilon > 0:
            raise DataError("Reflection epsilon must be > 0 when enabled")

    @classmethod
    def at(cls, epsilon: Optional[float]) -> "ReflectionSpec":
        return cls(True, float(epsilon)) if epsilon is not None else cls()


@dataclass(frozen=True)
class HiddenState:
    """Current values of r(0)..r(p-1) as a p x d array"""

    layers: np.ndarray

    @property
    def p(self) -> int:
        return self.layers.shape[0]

    @classmethod
    def zeros(cls, p: int, d: int) -> "HiddenState":
        return cls(np.zeros((p, d)))


@dataclass(frozen=True)
class HiddenHistory:
    """Hidden levels reconstructed backward from an observed window; r(m) has n-1-m rows"""

    x: np.ndarray
    residuals: Tuple[np.ndarray, ...]

    @property
    def p(self) -> int:
        return len(self.residuals)

    @property
    def latest_index(self) -> int:
        """Last sample index at which every hidden level is known"""
        return self.x.shape[0] - 1 - self.p

    def state_at(self, k: int) -> HiddenState:
        if not 0 <= k <= self.latest_index:
            raise DataError(f"Hidden state only known for indices 0..{self.latest_index}, asked {k}")
        d = self.x.shape[1]
        if not self.residuals:
            return HiddenState.zeros(0, d)
        return HiddenState(np.stack([r[k] for r in self.residuals]))

    def latest(self) -> HiddenState:
        return self.state_at(self.latest_index)


@dataclass(frozen=True)
class EtaReport:
    rho: Tuple[float, ...]
    max_abs: float
    spread: Tuple[float, ...]
    n_seeds: int
    mode: str
    degenerate: bool = False
    per_seed: Tuple[Tuple[float, ...], ...] = ()
    names: Tuple[str, ...] = ()
    note: str = "cascade uses negated level self-blocks; cross-level and x couplings zeroed"

    def __post_init__(self):
        if any(abs(r) > 1.0 for r in self.rho):
            raise DataError("Pearson coefficients must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "rho": list(self.rho),
            "max_abs": self.max_abs,
            "spread": list(self.spread),
            "n_seeds": self.n_seeds,
            "mode": self.mode,
            "degenerate": self.degenerate,
            "names": list(self.names),
            "note": self.note,
        }


@dataclass
class ForecastEnsemble:
    members: np.ndarray          # n_ensemble x horizon x d
    dt: float
    t0: float
    names: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def horizon(self) -> int:
        return self.members.shape[1]

    def member(self, index: int) -> TimeSeries:
        return TimeSeries(self.members[index], self.dt, self.names, self.t0)

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def std(self) -> np.ndarray:
        if self.n_members < 2:
            return np.zeros(self.members.shape[1:])
        return self.members.std(axis=0, ddof=1)

    def summary(self) -> pd.DataFrame:
        """Per horizon step: time, then mean and std per channel"""
        frame = pd.DataFrame({"step": np.arange(1, self.horizon + 1),
                              "t": self.t0 + self.dt * np.arange(self.horizon)})
        mean, std = self.mean(), self.std()
        for c, name in enumerate(self.names):
            frame[f"mean_{name}"] = mean[:, c]
            frame[f"std_{name}"] = std[:, c]
        return frame


def member_generator(seed: int, member: int = 0) -> np.random.Generator:
    """PCG64 stream for one ensemble member, mixed through SeedSequence([seed, member])"""
    if seed < 0 or member < 0:
        raise DataError("seed and member index must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, member])))


def project_positive(x: np.ndarray, epsilon: float) -> np.ndarray:
    """Euclidean projection onto the box {x_i >= epsilon}"""
    if not epsilon > 0:
        raise DataError("epsilon must be > 0")
    return np.maximum(np.asarray(x, dtype=float), epsilon)


class _Stepper:
    """One Euler step of the stacked state s = (x, r(0), ..., r(p-1)), batched over rows"""

    def __init__(self, model: EMRModel, dt: float, reflection: ReflectionSpec):
        self.model = model
        self.d = model.d
        self.dt = dt
        self.G = grand_linear_operator(model).matrix
        self.reflection = reflection
        self.factor_t = model.noise.factor.T * np.sqrt(dt)

    def step(self, s: np.ndarray, xi: Optional[np.ndarray]) -> np.ndarray:
        d = self.d
        x = s[:, :d]
        drift = s @ self.G.T
        drift[:, :d] += self.model.main.F + self.model.main.quadratic_term(x)
        nxt = s + self.dt * drift
        if xi is not None:
            nxt[:, -d:] += xi @ self.factor_t
        if self.reflection.enabled:
            nxt[:, :d] = np.maximum(nxt[:, :d], self.reflection.epsilon)
        return nxt


def _noise_blocks(rng: np.random.Generator, steps: int, d: int):
    done = 0
    while done < steps:
        size = min(NOISE_CHUNK, steps - done)
        yield rng.standard_normal((size, d))
        done += size


def _initial_stack(model: EMRModel, x0: np.ndarray,
                   hidden0: Union[HiddenState, np.ndarray, None]) -> np.ndarray:
    d, p = model.d, model.p
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != d or not np.isfinite(x0).all():
        raise DataError(f"x0 must be a finite {d}-vector")
    if hidden0 is None:
        layers = np.zeros((p, d))
    else:
        layers = hidden0.layers if isinstance(hidden0, HiddenState) else np.asarray(hidden0, dtype=float)
        layers = layers.reshape(-1, d) if layers.size else np.zeros((0, d))
    if layers.shape[0] != p:
        raise DataError(f"Hidden state holds {layers.shape[0]} levels, model has p={p}")
    return np.concatenate([x0, layers.ravel()])[None, :]


def simulate_stacked(model: EMRModel, x0: np.ndarray,
                     hidden0: Union[HiddenState, np.ndarray, None] = None,
                     config: SimConfig = SimConfig(steps=1),
                     reflection: ReflectionSpec = ReflectionSpec(),
                     source: str = "simulate") -> Tuple[TimeSeries, np.ndarray]:
    """Integrate the full stacked state; returns the recorded x series and the recorded
    hidden layers (n_records x p x d)."""
    dt = config.dt or model.dt
    d, p = model.d, model.p
    s = _initial_stack(model, x0, hidden0)
    if reflection.enabled and np.any(s[0, :d] < reflection.epsilon):
        raise DataError(f"x0 lies outside the reflection box (epsilon={reflection.epsilon})")

    stepper = _Stepper(model, dt, reflection)
    rng = member_generator(config.seed)
    stochastic = not model.noise.is_zero
    emit_event(EventType.SIMULATION_STARTED, source, {
        "steps": config.steps, "dt": dt, "seed": config.seed, "p": p,
        "reflect": reflection.epsilon if reflection.enabled else None,
    })

    records = []
    if config.burn_in == 0:
        records.append(s[0].copy())
    k = 0
    blocks = _noise_blocks(rng, config.steps, d) if stochastic else None
    while k < config.steps:
        chunk = next(blocks) if stochastic else None
        size = chunk.shape[0] if stochastic else min(NOISE_CHUNK, config.steps - k)
        for i in range(size):
            s = stepper.step(s, chunk[i:i + 1] if stochastic else None)
            k += 1
            if not np.isfinite(s).all():
                emit_event(EventType.SIMULATION_BLOWUP, source, {"step": k})
                raise BlowUpError(f"Non-finite model state at step {k}", step=k)
            if k >= config.burn_in and (k - config.burn_in) % config.sample_stride == 0:
                records.append(s[0].copy())

    states = np.array(records)
    ts = TimeSeries(states[:, :d], dt * config.sample_stride, model.names, config.burn_in * dt)
    emit_event(EventType.SIMULATION_COMPLETED, source, {"steps": config.steps, "records": ts.n})
    return ts, states[:, d:].reshape(-1, p, d)


def simulate_emr(model: EMRModel, x0: np.ndarray,
                 hidden0: Union[HiddenState, np.ndarray, None] = None,
                 config: SimConfig = SimConfig(steps=1),
                 reflection: ReflectionSpec = ReflectionSpec(),
                 source: str = "simulate") -> TimeSeries:
    """Free-running (or reflected) trajectory of the observed variables"""
    ts, _ = simulate_stacked(model, x0, hidden0, config, reflection, source)
    return ts


def _check_window(model: EMRModel, window: Union[TimeSeries, np.ndarray]) -> np.ndarray:
    if isinstance(window, TimeSeries):
        if not np.isclose(window.dt, model.dt, rtol=1e-9):
            raise DataError(f"Window dt={window.dt} differs from model dt={model.dt}")
        return window.data
    x = np.asarray(window, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def init_hidden_backward(model: EMRModel, observed_window: Union[TimeSeries, np.ndarray]) -> HiddenHistory:
    """Recover r(0)..r(p-1) from observed data with the last-level noise dropped.

    r(m) is known one index earlier than r(m-1), so p+1 points fix every level at index 0.
    """
    x = _check_window(model, observed_window)
    if x.shape[0] < model.p + 1:
        raise DataError(f"Backward initialization needs {model.p + 1} points, window has {x.shape[0]}")
    if model.p == 0:
        return HiddenHistory(x, ())
    residuals = reconstruct_residuals(model, x, depth=model.p - 1)
    return HiddenHistory(x, tuple(residuals))


def forecast(model: EMRModel, observed_window: Union[TimeSeries, np.ndarray], horizon: int,
             n_ensemble: int = 1, seed: int = 0,
             reflection: ReflectionSpec = ReflectionSpec()) -> ForecastEnsemble:
    """Ensemble forecast from the end of the window.

    Members start from the latest fully known stacked state, spin forward to the last
    observed sample while overwriting every value the data determines, then run free.
    """
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    if n_ensemble < 1:
        raise DataError("n_ensemble must be >= 1")
    history = init_hidden_backward(model, observed_window)
    x = history.x
    n, d, p = x.shape[0], model.d, model.p
    k0 = history.latest_index
    stepper = _Stepper(model, model.dt, reflection)

    start = np.concatenate([x[k0], history.latest().layers.ravel()])
    s = np.repeat(start[None, :], n_ensemble, axis=0)
    total = (n - 1 - k0) + horizon
    stochastic = not model.noise.is_zero
    noise = np.stack([member_generator(seed, member).standard_normal((total, d))
                      for member in range(n_ensemble)], axis=1) if stochastic else None

    out = np.empty((n_ensemble, horizon, d))
    for step in range(total):
        s = stepper.step(s, noise[step] if stochastic else None)
        k = k0 + step + 1
        if k <= n - 1:
            s[:, :d] = x[k]
            for m, r in enumerate(history.residuals):
                if k < r.shape[0]:
                    s[:, (m + 1) * d:(m + 2) * d] = r[k]
        else:
            if not np.isfinite(s).all():
                raise BlowUpError(f"Forecast diverged at horizon step {k - n + 1}", step=k - n + 1)
            out[:, k - n] = s[:, :d]

    dt = model.dt
    t_end = observed_window.t0 + (n - 1) * dt if isinstance(observed_window, TimeSeries) else (n - 1) * dt
    return ForecastEnsemble(out, dt, t_end + dt, tuple(model.names))


def save_ensemble(ensemble: ForecastEnsemble, out_dir: Union[str, Path]) -> List[Path]:
    """One CSV per member plus summary.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_samples(ensemble.members[i], ensemble.names, ensemble.dt, ensemble.t0,
                           out_dir / f"member_{i:03d}.csv")
             for i in range(ensemble.n_members)]
    summary = out_dir / "summary.csv"
    ensemble.summary().to_csv(summary, index=False, float_format="%.17g")
    paths.append(summary)
    return paths


def cascade_blocks(model: EMRModel) -> List[np.ndarray]:
    """D_m = -(self block of L(m)), m = 1..p"""
    return [-op.self_block for op in model.levels]


def simulate_eta_cascade(model: EMRModel, steps: int, seed: int = 0, dt: Optional[float] = None,
                         forcing: Optional[np.ndarray] = None, spin_up: int = 0) -> TimeSeries:
    """Integrate dz_p = -D_p z_p + noise, dz_m = -D_m z_m + z_(m+1); returns xi = z_1.

    ``forcing`` replaces the Gaussian noise by given per-step increments (steps x d); the
    spin-up always uses seeded Gaussian noise, so the seed sets the initial cascade state.
    """
    if model.p == 0:
        raise ModelError("The eta cascade needs at least one hidden level")
    if steps < 2:
        raise DataError("The eta cascade needs at least 2 steps")
    dt = dt or model.dt
    d, p = model.d, model.p
    D = cascade_blocks(model)
    factor_t = model.noise.factor.T * np.sqrt(dt)
    rng = member_generator(seed)
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=float)
        if forcing.shape != (steps, d):
            raise DataError(f"Forcing must be {steps} x {d}, got {forcing.shape}")

    z = np.zeros((p, d))
    xi = np.empty((steps, d))

    def advance(z: np.ndarray, increment: np.ndarray) -> np.ndarray:
        nxt = z.copy()
        for m in range(p):
            coupling = z[m + 1] if m + 1 < p else 0.0
            nxt[m] = z[m] + dt * (coupling - D[m] @ z[m])
        nxt[p - 1] += increment
        return nxt

    for _ in range(spin_up):
        z = advance(z, rng.standard_normal(d) @ factor_t)
    draws = rng.standard_normal((steps, d)) @ factor_t if forcing is None else forcing
    for k in range(steps):
        xi[k] = z[0]
        z = advance(z, draws[k])
        if not np.isfinite(z).all():
            raise BlowUpError(f"Eta cascade diverged at step {k + 1}", step=k + 1)
    return TimeSeries(xi, dt, tuple(f"xi_{name}" for name in model.names))


def eta_test(model: EMRModel, observed_ts: TimeSeries, n_seeds: int = 10, mode: str = "reconstructed",
             spin_up: int = 2000, seed: int = 0) -> EtaReport:
    """Component-wise Pearson correlation between the x-independent forcing xi and x,
    averaged over seeds.

    ``reconstructed`` drives the cascade with the data's own last-level residual;
    ``simulated`` uses fresh Gaussian forcing.
    """
    if mode not in ("reconstructed", "simulated"):
        raise DataError(f"eta mode must be 'reconstructed' or 'simulated', got {mode!r}")
    if n_seeds < 1:
        raise DataError("n_seeds must be >= 1")
    if model.p == 0:
        raise ModelError("The eta-test needs a model with at least one hidden level")
    x = _check_window(model, observed_ts)
    d = model.d

    if model.noise.is_zero:
        logger.warning("Zero noise covariance: xi vanishes, correlations reported as 0")
        zeros = tuple(0.0 for _ in range(d))
        return EtaReport(zeros, 0.0, zeros, n_seeds, mode, degenerate=True,
                         per_seed=tuple(zeros for _ in range(n_seeds)), names=model.names)

    if mode == "reconstructed":
        last = reconstruct_residuals(model, x)[-1]
        forcing = last * model.dt
        steps = forcing.shape[0]
    else:
        forcing = None
        steps = x.shape[0]
    target = x[:steps]

    per_seed: List[Tuple[float, ...]] = []
    degenerate = False
    for i in range(n_seeds):
        xi = simulate_eta_cascade(model, steps, seed + i, forcing=forcing, spin_up=spin_up).data
        row = []
        for c in range(d):
            try:
                row.append(pearson(xi[:, c], target[:, c]))
            except DataError:
                row.append(0.0)
                degenerate = True
        per_seed.append(tuple(row))

    values = np.array(per_seed)
    rho = values.mean(axis=0)
    spread = values.std(axis=0)
    report = EtaReport(
        rho=tuple(float(v) for v in rho),
        max_abs=float(np.max(np.abs(rho))),
        spread=tuple(float(v) for v in spread),
        n_seeds=n_seeds,
        mode=mode,
        degenerate=degenerate,
        per_seed=tuple(per_seed),
        names=model.names,
    )
    logger.info(f"Eta-test ({mode}, {n_seeds} seeds): max|rho|={report.max_abs:.3f}")
    return report
