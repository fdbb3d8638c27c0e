"""
EMR Closure - Shared test fixtures
Seeded generators, small synthetic records and hand-built models
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from emr_closure.core.emr import (EMRModel, LevelOperator, NoiseSpec,  # noqa: E402
                                  QuadraticMainLevel, fit_emr)
from emr_closure.core.events import event_bus  # noqa: E402
from emr_closure.core.timeseries import TimeSeries  # noqa: E402


@pytest.fixture(autouse=True)
def clean_event_bus():
    event_bus.clear()
    yield
    event_bus.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ou_series(n: int = 3000, dt: float = 0.01, seed: int = 7) -> TimeSeries:
    """Two coupled Ornstein-Uhlenbeck channels, Euler-Maruyama"""
    gen = np.random.default_rng(seed)
    M = np.array([[-1.0, 0.4], [-0.4, -0.5]])
    x = np.zeros((n, 2))
    kick = np.sqrt(dt) * gen.standard_normal((n, 2))
    for k in range(n - 1):
        x[k + 1] = x[k] + dt * (M @ x[k]) + kick[k]
    return TimeSeries(x, dt, ("u", "v"))


@pytest.fixture
def ou_ts() -> TimeSeries:
    return ou_series()


@pytest.fixture
def fitted_model(ou_ts) -> EMRModel:
    return fit_emr(ou_ts, n_levels=1)


def hidden_model(noise_scale: float = 0.0) -> EMRModel:
    """d=2, p=1: dx = -x + r0, dr0 = -0.5 x - 2 r0 (+ noise), weak quadratic coupling"""
    d = 2
    B = np.array([[0.0, 0.05, 0.0], [-0.05, 0.0, 0.0]])
    main = QuadraticMainLevel(np.zeros(d), np.eye(d), B)
    L = np.hstack([-0.5 * np.eye(d), -2.0 * np.eye(d)])
    Q = noise_scale ** 2 * np.eye(d)
    noise = NoiseSpec(Q, noise_scale * np.eye(d))
    return EMRModel(main, (LevelOperator(1, L),), noise, 0.01, names=("u", "v"))


@pytest.fixture
def deterministic_model() -> EMRModel:
    return hidden_model(0.0)


@pytest.fixture
def noisy_model() -> EMRModel:
    return hidden_model(0.5)


@pytest.fixture
def model_factory():
    return hidden_model


@pytest.fixture
def series_factory():
    return ou_series
