"""
EMR Closure - Time series ingestion and statistics
Uniformly sampled multivariate series plus the ACF / PDF / EOF summaries used to
compare a closure model against the data it was fitted on.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .errors import DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SIDECAR_SUFFIX = ".meta.yaml"


@dataclass(frozen=True)
class TimeSeries:
    """N x d samples on the grid t0 + k*dt"""

    data: np.ndarray
    dt: float
    names: Tuple[str, ...] = ()
    t0: float = 0.0

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise DataError(f"Time series data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 2:
            raise DataError(f"Time series needs at least 2 samples, got {data.shape[0]}")
        if not np.isfinite(data).all():
            bad = int(np.argwhere(~np.isfinite(data))[0][0])
            raise DataError(f"Non-finite value in time series at row {bad}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise DataError(f"dt must be a positive real, got {self.dt}")
        names = tuple(self.names) if self.names else tuple(f"x{i + 1}" for i in range(data.shape[1]))
        if len(names) != data.shape[1]:
            raise DataError(f"{len(names)} names for {data.shape[1]} channels")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def duration(self) -> float:
        return self.dt * (self.n - 1)

    def channel(self, index: int) -> np.ndarray:
        _check_channel(self, index)
        return self.data[:, index]

    def select(self, channels: Sequence[int]) -> "TimeSeries":
        if len(channels) == 0:
            raise DataError("Select needs at least one channel")
        for c in channels:
            _check_channel(self, c)
        return TimeSeries(self.data[:, list(channels)], self.dt,
                          tuple(self.names[c] for c in channels), self.t0)

    def slice(self, start: int = 0, stop: Optional[int] = None, stride: int = 1) -> "TimeSeries":
        part = self.data[start:stop:stride]
        begin = range(self.n)[start:stop:stride]
        if len(begin) < 2:
            raise DataError(f"Slice selects {len(begin)} samples, a series needs at least 2")
        return TimeSeries(part, self.dt * stride, self.names, self.t0 + begin[0] * self.dt)


@dataclass(frozen=True)
class Histogram1D:
    edges: np.ndarray
    density: np.ndarray
    name: str = ""

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def integral(self) -> float:
        return float(np.sum(self.density * self.widths))


@dataclass(frozen=True)
class Histogram2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    density: np.ndarray
    names: Tuple[str, str] = ("", "")

    def integral(self) -> float:
        area = np.outer(np.diff(self.x_edges), np.diff(self.y_edges))
        return float(np.sum(self.density * area))


@dataclass(frozen=True)
class AcfCurve:
    lags: np.ndarray
    values: np.ndarray          # (L+1) x d
    names: Tuple[str, ...] = ()
    dt: float = 1.0
    degenerate: Tuple[bool, ...] = ()

    @property
    def lag_times(self) -> np.ndarray:
        return self.lags * self.dt


@dataclass(frozen=True)
class EofBasis:
    mean: np.ndarray
    modes: np.ndarray                 # full_dim x d_keep, orthonormal columns
    explained_variance: np.ndarray    # d_keep, nonincreasing
    total_variance: float = 0.0
    discarded_variance: float = 0.0
    all_variances: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_channel(ts: TimeSeries, index: int) -> None:
    if not 0 <= index < ts.d:
        raise DataError(f"Channel index {index} out of range for {ts.d} channels")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def load_csv(path: Union[str, Path], dt: Optional[float] = None,
             skip_transient: Optional[int] = None,
             transient_fraction: float = 0.1) -> TimeSeries:
    """Read a header-plus-rows CSV; dt comes from the argument or the sidecar metadata.

    skip_transient=None (the default) drops the leading ``transient_fraction`` of the record;
    pass 0 to keep every row.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Data file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot parse {path}: {e}") from e

    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DataError(f"Non-numeric value in {path}: {e}") from e
    if values.ndim != 2 or values.shape[1] == 0:
        raise DataError(f"{path} has no data columns")
    if not np.isfinite(values).all():
        row = int(np.argwhere(~np.isfinite(values))[0][0])
        raise DataError(f"Non-finite or missing value in {path} at data row {row}")

    t0 = 0.0
    meta_path = _sidecar(path)
    if meta_path.exists():
        with open(meta_path) as f:
            meta = yaml.safe_load(f) or {}
        if dt is None:
            dt = meta.get("dt")
        t0 = float(meta.get("t0", 0.0))
    if dt is None:
        raise DataError(f"No dt given for {path} and no sidecar {meta_path.name}")

    n = values.shape[0]
    skip = int(transient_fraction * n) if skip_transient is None else int(skip_transient)
    if skip < 0:
        raise DataError("skip_transient must be >= 0")
    if n - skip < 2:
        raise DataError(f"{path}: {n} rows minus {skip} transient rows leaves fewer than 2 samples")

    logger.debug(f"Loaded {path}: {n} rows, skipping {skip}")
    return TimeSeries(values[skip:], float(dt), tuple(str(c) for c in frame.columns),
                      t0 + skip * float(dt))


def save_csv(ts: TimeSeries, path: Union[str, Path]) -> Path:
    """Write the common CSV schema (17 significant digits) plus sidecar metadata"""
    return write_samples(ts.data, ts.names, ts.dt, ts.t0, path)


def write_samples(data: np.ndarray, names: Sequence[str], dt: float, t0: float,
                  path: Union[str, Path]) -> Path:
    """save_csv for raw rows, including one-row forecast members"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(np.asarray(data), columns=list(names)).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    with open(_sidecar(path), "w") as f:
        yaml.safe_dump({"dt": float(dt), "t0": float(t0), "names": list(names)}, f, sort_keys=False)
    return path


def finite_differences(ts: TimeSeries) -> TimeSeries:
    """Row k = (x_{k+1} - x_k) / dt, N-1 rows"""
    return TimeSeries(np.diff(ts.data, axis=0) / ts.dt, ts.dt, ts.names, ts.t0)


def eof_compress(ts: TimeSeries, d_keep: int) -> Tuple[TimeSeries, EofBasis]:
    """Project onto the leading empirical orthogonal functions"""
    if not 1 <= d_keep <= ts.d:
        raise DataError(f"d_keep must be in [1, {ts.d}], got {d_keep}")

    mean = ts.data.mean(axis=0)
    centered = ts.data - mean
    cov = centered.T @ centered / (ts.n - 1)
    variances, vectors = np.linalg.eigh(cov)
    order = np.argsort(-variances, kind="stable")
    variances = np.clip(variances[order], 0.0, None)
    vectors = vectors[:, order]

    # Sign convention: largest-magnitude loading of each mode is positive
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(ts.d)])
    signs[signs == 0] = 1.0
    vectors = vectors * signs

    modes = vectors[:, :d_keep]
    pcs = centered @ modes
    basis = EofBasis(
        mean=mean,
        modes=modes,
        explained_variance=variances[:d_keep],
        total_variance=float(variances.sum()),
        discarded_variance=float(variances[d_keep:].sum()),
        all_variances=variances,
    )
    names = tuple(f"pc{i + 1}" for i in range(d_keep))
    return TimeSeries(pcs, ts.dt, names, ts.t0), basis


def eof_reconstruct(pcs: Union[TimeSeries, np.ndarray], basis: EofBasis) -> np.ndarray:
    values = pcs.data if isinstance(pcs, TimeSeries) else np.asarray(pcs, dtype=float)
    return values @ basis.modes.T + basis.mean


def _autocovariance(values: np.ndarray, max_lag: int) -> np.ndarray:
    n = values.shape[0]
    centered = values - values.mean(axis=0)
    cov = np.empty((max_lag + 1, values.shape[1]))
    for lag in range(max_lag + 1):
        cov[lag] = np.einsum("ij,ij->j", centered[: n - lag], centered[lag:]) / n
    return cov


def acf(ts: TimeSeries, max_lag: int) -> AcfCurve:
    """Biased (1/N) autocorrelation per channel"""
    if not 0 <= max_lag < ts.n:
        raise DataError(f"max_lag must be in [0, {ts.n - 1}], got {max_lag}")
    cov = _autocovariance(ts.data, max_lag)
    c0 = cov[0]
    degenerate = c0 <= 0.0
    values = np.zeros_like(cov)
    live = ~degenerate
    values[:, live] = np.clip(cov[:, live] / c0[live], -1.0, 1.0)
    values[0, :] = 1.0
    if degenerate.any():
        logger.warning(f"Zero-variance channels in acf: "
                       f"{[n for n, flag in zip(ts.names, degenerate) if flag]}")
    return AcfCurve(np.arange(max_lag + 1), values, ts.names, ts.dt, tuple(bool(f) for f in degenerate))


def lag1_autocorrelation(values: np.ndarray) -> np.ndarray:
    """Lag-1 value of the biased ACF for each column of a raw array; 0 for constant columns"""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    cov = _autocovariance(values, 1)
    out = np.zeros(values.shape[1])
    live = cov[0] > 0
    out[live] = cov[1, live] / cov[0, live]
    return out


def _padded_edges(values: np.ndarray, bins: int, padding: float) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    pad = padding * span if span > 0 else padding * max(abs(lo), 1.0)
    return np.linspace(lo - pad, hi + pad, bins + 1)


def pdf1d(ts: TimeSeries, channel: int, bins: int = 50, padding: float = 0.01,
          edges: Optional[np.ndarray] = None) -> Histogram1D:
    """Normalized histogram over the data range widened by ``padding`` on each side"""
    if bins < 2:
        raise DataError("bins must be >= 2")
    values = ts.channel(channel)
    if edges is None:
        edges = _padded_edges(values, bins, padding)
    density, edges = np.histogram(values, bins=edges, density=True)
    return Histogram1D(edges, density, ts.names[channel])


def pdf2d(ts: TimeSeries, i: int, j: int, bins: int = 50, padding: float = 0.01) -> Histogram2D:
    if bins < 2:
        raise DataError("bins must be >= 2")
    xi, xj = ts.channel(i), ts.channel(j)
    x_edges = _padded_edges(xi, bins, padding)
    y_edges = _padded_edges(xj, bins, padding)
    density, x_edges, y_edges = np.histogram2d(xi, xj, bins=(x_edges, y_edges), density=True)
    return Histogram2D(x_edges, y_edges, density, (ts.names[i], ts.names[j]))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Covariance divided by the product of standard deviations"""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise DataError(f"pearson needs equal lengths, got {x.size} and {y.size}")
    if x.size < 2:
        raise DataError("pearson needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0.0 or sy == 0.0:
        raise DataError("pearson is undefined for a constant input")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def variance_by_channel(ts: TimeSeries) -> np.ndarray:
    """Unbiased sample variance per channel"""
    return ts.data.var(axis=0, ddof=1)


def pdf_l1_distance(a: TimeSeries, b: TimeSeries, channel: int, bins: int = 50,
                    padding: float = 0.01) -> float:
    """L1 distance between two 1-D densities on shared edges"""
    both = np.concatenate([a.channel(channel), b.channel(channel)])
    edges = _padded_edges(both, bins, padding)
    ha = pdf1d(a, channel, edges=edges)
    hb = pdf1d(b, channel, edges=edges)
    return float(np.sum(np.abs(ha.density - hb.density) * ha.widths))


def acf_max_deviation(a: AcfCurve, b: AcfCurve, max_lag: Optional[int] = None) -> np.ndarray:
    """Per-channel max |acf_a - acf_b| over the common lags"""
    top = min(len(a.lags), len(b.lags)) if max_lag is None else max_lag + 1
    return np.max(np.abs(a.values[:top] - b.values[:top]), axis=0)


def acf_rms_error(a: AcfCurve, b: AcfCurve, max_lag: Optional[int] = None) -> np.ndarray:
    top = min(len(a.lags), len(b.lags)) if max_lag is None else max_lag + 1
    return np.sqrt(np.mean((a.values[:top] - b.values[:top]) ** 2, axis=0))
