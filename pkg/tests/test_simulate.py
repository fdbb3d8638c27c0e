"""Model stepping, reflection, hidden-state initialization, forecasts and the eta cascade"""
import numpy as np
import pandas as pd
import pytest

from emr_closure.core.emr import EMRModel, LevelOperator, NoiseSpec, QuadraticMainLevel
from emr_closure.core.errors import BlowUpError, DataError, ModelError
from emr_closure.core.events import EventType, event_bus
from emr_closure.core.simulate import (ForecastEnsemble, HiddenState, ReflectionSpec, SimConfig, cascade_blocks,
                                       eta_test, forecast, init_hidden_backward, member_generator,
                                       project_positive, save_ensemble, simulate_emr, simulate_eta_cascade,
                                       simulate_stacked)
from emr_closure.core.timeseries import TimeSeries, acf, lag1_autocorrelation

X0 = np.array([1.0, -0.5])
HIDDEN0 = HiddenState(np.array([[0.3, 0.1]]))


def test_sim_config_validation():
    with pytest.raises(DataError):
        SimConfig(steps=0)
    with pytest.raises(DataError):
        SimConfig(steps=5, burn_in=6)
    with pytest.raises(DataError):
        SimConfig(steps=5, sample_stride=0)
    with pytest.raises(DataError, match="at least 2"):
        SimConfig(steps=4, burn_in=4)
    with pytest.raises(DataError, match="at least 2"):
        SimConfig(steps=3, sample_stride=5)
    assert SimConfig(steps=1).records == 2
    assert SimConfig(steps=10, sample_stride=2, burn_in=4).records == 4
    with pytest.raises(DataError):
        ReflectionSpec(True, 0.0)
    assert not ReflectionSpec.at(None).enabled
    assert ReflectionSpec.at(0.12).epsilon == 0.12


def test_records_start_state(deterministic_model):
    ts = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=10))
    assert ts.n == 11
    np.testing.assert_array_equal(ts.data[0], X0)
    assert ts.names == ("u", "v")
    assert ts.dt == deterministic_model.dt


def test_stride_and_burn_in(deterministic_model):
    ts = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=10, sample_stride=2, burn_in=4))
    full = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=10))
    assert ts.n == 4
    assert ts.t0 == pytest.approx(0.04)
    assert ts.dt == pytest.approx(0.02)
    np.testing.assert_allclose(ts.data, full.data[4::2])


def test_seeded_runs_are_reproducible(noisy_model):
    config = SimConfig(steps=200, seed=3)
    a = simulate_emr(noisy_model, X0, None, config)
    b = simulate_emr(noisy_model, X0, None, config)
    c = simulate_emr(noisy_model, X0, None, SimConfig(steps=200, seed=4))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.allclose(a.data, c.data)


def test_zero_noise_ignores_seed(deterministic_model):
    a = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=50, seed=1))
    b = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=50, seed=99))
    np.testing.assert_array_equal(a.data, b.data)


def test_reflection_keeps_states_in_box(noisy_model):
    ts = simulate_emr(noisy_model, [1.0, 1.0], None, SimConfig(steps=2000, seed=0), ReflectionSpec.at(0.5))
    assert ts.data.min() >= 0.5
    with pytest.raises(DataError, match="reflection box"):
        simulate_emr(noisy_model, [0.1, 1.0], None, SimConfig(steps=5), ReflectionSpec.at(0.5))


def test_project_positive():
    np.testing.assert_array_equal(project_positive([-1.0, 0.5, 2.0], 0.1), [0.1, 0.5, 2.0])
    with pytest.raises(DataError):
        project_positive([1.0], 0.0)


def test_blow_up_reports_step():
    model = EMRModel(QuadraticMainLevel([0.0], [[0.0]], [[1.0]]), (),
                     NoiseSpec(np.zeros((1, 1)), np.zeros((1, 1))), 0.1)
    with pytest.raises(BlowUpError) as info:
        simulate_emr(model, [10.0], None, SimConfig(steps=1000))
    assert info.value.step is not None and info.value.step < 1000
    assert event_bus.get_events_by_type(EventType.SIMULATION_BLOWUP)


def test_initial_state_shape_checked(deterministic_model):
    with pytest.raises(DataError):
        simulate_emr(deterministic_model, [1.0, 2.0, 3.0], None)
    with pytest.raises(DataError):
        simulate_emr(deterministic_model, X0, np.zeros((2, 2)))


def test_stacked_run_returns_hidden_layers(deterministic_model):
    ts, hidden = simulate_stacked(deterministic_model, X0, HIDDEN0, SimConfig(steps=20))
    assert hidden.shape == (21, 1, 2)
    np.testing.assert_array_equal(hidden[0, 0], HIDDEN0.layers[0])


def test_backward_initialization_recovers_hidden_levels(deterministic_model):
    ts, hidden = simulate_stacked(deterministic_model, X0, HIDDEN0, SimConfig(steps=60))
    history = init_hidden_backward(deterministic_model, ts.slice(0, 41))
    assert history.p == 1
    assert history.latest_index == 39
    np.testing.assert_allclose(history.residuals[0], hidden[:40, 0], atol=1e-9)
    np.testing.assert_allclose(history.latest().layers, hidden[39], atol=1e-9)
    with pytest.raises(DataError):
        history.state_at(40)


def test_backward_initialization_needs_p_plus_one_points(deterministic_model):
    with pytest.raises(DataError, match="2 points"):
        init_hidden_backward(deterministic_model, np.array([[1.0, 0.0]]))
    history = init_hidden_backward(deterministic_model, np.array([[1.0, 0.0], [0.9, 0.1]]))
    assert history.latest_index == 0
    with pytest.raises(DataError):
        init_hidden_backward(deterministic_model, TimeSeries(np.zeros((5, 2)), 0.5))


def test_noise_free_forecast_continues_the_trajectory(deterministic_model):
    ts, _ = simulate_stacked(deterministic_model, X0, HIDDEN0, SimConfig(steps=60))
    ensemble = forecast(deterministic_model, ts.slice(0, 41), horizon=20, n_ensemble=3)
    assert ensemble.members.shape == (3, 20, 2)
    np.testing.assert_allclose(ensemble.members[0], ts.data[41:61], atol=1e-8)
    np.testing.assert_array_equal(ensemble.std(), 0.0)
    assert ensemble.t0 == pytest.approx(0.41)


def test_stochastic_forecast_members(noisy_model):
    window = simulate_emr(noisy_model, X0, None, SimConfig(steps=100, seed=2))
    a = forecast(noisy_model, window, horizon=15, n_ensemble=4, seed=8)
    b = forecast(noisy_model, window, horizon=15, n_ensemble=4, seed=8)
    np.testing.assert_array_equal(a.members, b.members)
    assert not np.allclose(a.members[0], a.members[1])
    assert a.member(2).n == 15
    with pytest.raises(DataError):
        forecast(noisy_model, window, horizon=0)


def test_save_ensemble(tmp_path, noisy_model):
    window = simulate_emr(noisy_model, X0, None, SimConfig(steps=50, seed=2))
    ensemble = forecast(noisy_model, window, horizon=5, n_ensemble=2, seed=1)
    paths = save_ensemble(ensemble, tmp_path)
    assert [p.name for p in paths] == ["member_000.csv", "member_001.csv", "summary.csv"]
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert list(summary.columns) == ["step", "t", "mean_u", "std_u", "mean_v", "std_v"]
    assert len(summary) == 5


def test_single_member_has_zero_spread():
    ensemble = ForecastEnsemble(np.ones((1, 4, 2)), 0.1, 0.0, ("a", "b"))
    np.testing.assert_array_equal(ensemble.std(), np.zeros((4, 2)))
    np.testing.assert_array_equal(ensemble.mean(), np.ones((4, 2)))


def test_member_streams():
    a = member_generator(5, 0).standard_normal(4)
    b = member_generator(5, 1).standard_normal(4)
    np.testing.assert_array_equal(a, member_generator(5, 0).standard_normal(4))
    assert not np.allclose(a, b)
    with pytest.raises(DataError):
        member_generator(-1)


def test_cascade_blocks_negate_self_coupling(deterministic_model):
    blocks = cascade_blocks(deterministic_model)
    assert len(blocks) == 1
    np.testing.assert_array_equal(blocks[0], 2.0 * np.eye(2))


def test_cascade_forcing(noisy_model):
    xi = simulate_eta_cascade(noisy_model, 100, forcing=np.zeros((100, 2)))
    np.testing.assert_array_equal(xi.data, 0.0)
    assert xi.names == ("xi_u", "xi_v")
    with pytest.raises(DataError):
        simulate_eta_cascade(noisy_model, 100, forcing=np.zeros((99, 2)))


def test_eta_requires_hidden_levels(fitted_model, ou_ts):
    model = EMRModel(fitted_model.main, (), fitted_model.noise, fitted_model.dt)
    with pytest.raises(ModelError):
        eta_test(model, ou_ts)
    with pytest.raises(DataError):
        eta_test(fitted_model, ou_ts, mode="replayed")


def test_eta_with_zero_noise_is_degenerate(deterministic_model):
    data = simulate_emr(deterministic_model, X0, HIDDEN0, SimConfig(steps=300))
    report = eta_test(deterministic_model, data, n_seeds=3)
    assert report.degenerate
    assert report.rho == (0.0, 0.0)
    assert report.max_abs == 0.0
    assert len(report.per_seed) == 3


def test_eta_reconstructed_mode(noisy_model):
    data = simulate_emr(noisy_model, X0, None, SimConfig(steps=3000, seed=5))
    report = eta_test(noisy_model, data, n_seeds=3, spin_up=0)
    assert report.mode == "reconstructed"
    assert all(-1.0 <= r <= 1.0 for r in report.rho)
    # seeds only change the spun-up cascade state
    np.testing.assert_allclose(report.spread, 0.0, atol=1e-12)
    assert report.to_dict()["n_seeds"] == 3


def test_eta_simulated_mode(noisy_model):
    data = simulate_emr(noisy_model, X0, None, SimConfig(steps=3000, seed=5))
    report = eta_test(noisy_model, data, n_seeds=4, mode="simulated", spin_up=100)
    assert len(report.per_seed) == 4
    assert report.max_abs == pytest.approx(max(abs(r) for r in report.rho))
    assert not report.degenerate


def scalar_ou(rate: float = 1.0, sigma: float = 1.0, dt: float = 0.01) -> EMRModel:
    """dx = -rate x dt + sigma dW with no hidden levels"""
    main = QuadraticMainLevel(np.zeros(1), rate * np.eye(1), np.zeros((1, 1)))
    noise = NoiseSpec(np.array([[sigma ** 2]]), np.array([[sigma]]))
    return EMRModel(main, (), noise, dt, names=("x",))


def cascade_model(p: int, dt: float = 0.01) -> EMRModel:
    """Scalar model whose hidden levels all decay at unit rate"""
    levels = tuple(LevelOperator(m, np.concatenate([np.zeros(m), [-1.0]])[None, :]) for m in range(1, p + 1))
    main = QuadraticMainLevel(np.zeros(1), np.eye(1), np.zeros((1, 1)))
    return EMRModel(main, levels, NoiseSpec(np.eye(1), np.eye(1)), dt, names=("x",))


def test_one_sample_ensemble_members_are_saved(tmp_path, noisy_model):
    window = simulate_emr(noisy_model, X0, None, SimConfig(steps=50, seed=2))
    ensemble = forecast(noisy_model, window, horizon=1, n_ensemble=2, seed=1)
    paths = save_ensemble(ensemble, tmp_path)
    assert [p.name for p in paths] == ["member_000.csv", "member_001.csv", "summary.csv"]
    member = pd.read_csv(tmp_path / "member_001.csv")
    np.testing.assert_allclose(member.to_numpy(), ensemble.members[1])
    assert len(pd.read_csv(tmp_path / "summary.csv")) == 1


def test_noise_free_forecast_over_a_hundred_steps(deterministic_model):
    ts, _ = simulate_stacked(deterministic_model, X0, HIDDEN0, SimConfig(steps=300))
    ensemble = forecast(deterministic_model, ts.slice(0, 101), horizon=100)
    np.testing.assert_allclose(ensemble.members[0], ts.data[101:201], atol=1e-6)


def test_ensemble_spread_reaches_stationary_std():
    model = scalar_ou()
    ensemble = forecast(model, np.array([[3.0], [3.0]]), horizon=2000, n_ensemble=400, seed=4)
    # stationary variance of the Euler-Maruyama recursion
    stationary = np.sqrt(1.0 / (2.0 - model.dt))
    assert ensemble.std()[-1, 0] == pytest.approx(stationary, rel=0.12)
    assert ensemble.mean()[-1, 0] == pytest.approx(0.0, abs=0.15)
    assert ensemble.std()[0, 0] < 0.2


def test_one_level_cascade_lag1_matches_decay():
    model = cascade_model(1)
    xi = simulate_eta_cascade(model, 100_000, seed=3, spin_up=1000)
    assert lag1_autocorrelation(xi.data)[0] == pytest.approx(1.0 - model.dt, abs=0.005)


def test_two_level_cascade_is_redder_than_one_level():
    one = acf(simulate_eta_cascade(cascade_model(1), 100_000, seed=3, spin_up=2000), 100)
    two = acf(simulate_eta_cascade(cascade_model(2), 100_000, seed=3, spin_up=2000), 100)
    # exact values at lag 100: 0.99^100 = 0.37 and 0.99^100 * (1 + 100 * 0.0199 / 1.9801) = 0.73
    assert one.values[100, 0] == pytest.approx(0.99 ** 100, abs=0.15)
    assert two.values[100, 0] > one.values[100, 0] + 0.2
