"""Time series container, CSV schema and summary statistics"""
import numpy as np
import pytest

from emr_closure.core.errors import DataError
from emr_closure.core.timeseries import (TimeSeries, acf, acf_max_deviation, acf_rms_error, eof_compress,
                                         eof_reconstruct, finite_differences, lag1_autocorrelation, load_csv,
                                         pdf1d, pdf2d, pdf_l1_distance, pearson, save_csv, variance_by_channel)


def test_defaults_and_grid():
    ts = TimeSeries(np.arange(6.0).reshape(3, 2), 0.5, t0=1.0)
    assert ts.names == ("x1", "x2")
    assert ts.n == 3 and ts.d == 2
    np.testing.assert_allclose(ts.times, [1.0, 1.5, 2.0])
    assert ts.duration == pytest.approx(1.0)


def test_rejects_bad_input():
    with pytest.raises(DataError, match="row 1"):
        TimeSeries(np.array([[0.0], [np.nan]]), 0.1)
    with pytest.raises(DataError):
        TimeSeries(np.zeros((3, 1)), 0.0)
    with pytest.raises(DataError):
        TimeSeries(np.zeros((3, 2)), 0.1, names=("only",))
    with pytest.raises(DataError, match="at least 2 samples"):
        TimeSeries(np.zeros((1, 2)), 1.0)


def test_slice_with_stride_rescales_time():
    ts = TimeSeries(np.arange(20.0), 0.1)
    part = ts.slice(10, None, 2)
    assert part.dt == pytest.approx(0.2)
    assert part.t0 == pytest.approx(1.0)
    np.testing.assert_array_equal(part.channel(0), np.arange(10.0, 20.0, 2.0))
    with pytest.raises(DataError):
        ts.slice(30)
    with pytest.raises(DataError, match="selects 1 samples"):
        ts.slice(19)
    with pytest.raises(DataError):
        ts.slice(0, 10, 10)


def test_select_and_channel_bounds():
    ts = TimeSeries(np.ones((4, 3)), 1.0, ("a", "b", "c"))
    assert ts.select([2, 0]).names == ("c", "a")
    with pytest.raises(DataError, match="at least one channel"):
        ts.select([])
    with pytest.raises(DataError):
        ts.channel(3)


def test_csv_round_trip_keeps_metadata(tmp_path, rng):
    ts = TimeSeries(rng.standard_normal((40, 2)), 0.05, ("u", "v"), t0=2.0)
    path = save_csv(ts, tmp_path / "series.csv")
    assert (tmp_path / "series.csv.meta.yaml").exists()

    loaded = load_csv(path, skip_transient=0)
    assert loaded.dt == pytest.approx(0.05)
    assert loaded.t0 == pytest.approx(2.0)
    assert loaded.names == ("u", "v")
    np.testing.assert_array_equal(loaded.data, ts.data)


def test_load_csv_without_dt_fails(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("a,b\n1,2\n3,4\n5,6\n")
    with pytest.raises(DataError, match="No dt"):
        load_csv(path)
    assert load_csv(path, dt=0.1).n == 3


def test_load_csv_reports_missing_values(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("a\n1\n\n2\nnan\n")
    with pytest.raises(DataError):
        load_csv(path, dt=1.0)


def test_default_transient_drops_ten_percent(tmp_path):
    ts = TimeSeries(np.arange(50.0), 0.2)
    path = save_csv(ts, tmp_path / "ramp.csv")
    trimmed = load_csv(path)
    assert trimmed.n == 45
    assert trimmed.t0 == pytest.approx(1.0)
    assert trimmed.data[0, 0] == 5.0
    assert load_csv(path, skip_transient=0).n == 50
    assert load_csv(path, skip_transient=None, transient_fraction=0.5).n == 25
    with pytest.raises(DataError):
        load_csv(path, skip_transient=49)


def test_finite_differences_of_ramp():
    ts = TimeSeries(3.0 * np.arange(10.0), 0.5)
    diff = finite_differences(ts)
    assert diff.n == 9
    np.testing.assert_allclose(diff.data, 6.0)


def test_acf_lag_zero_and_alternating_sign():
    n = 200
    alternating = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    curve = acf(TimeSeries(alternating, 1.0), 3)
    assert curve.values[0, 0] == 1.0
    assert curve.values[1, 0] == pytest.approx(-(n - 1) / n)
    assert curve.values[2, 0] == pytest.approx((n - 2) / n)
    np.testing.assert_allclose(curve.lag_times, [0.0, 1.0, 2.0, 3.0])


def test_acf_marks_constant_channels():
    data = np.column_stack([np.full(50, 3.0), np.sin(np.arange(50.0))])
    curve = acf(TimeSeries(data, 1.0), 5)
    assert curve.degenerate == (True, False)
    assert curve.values[0, 0] == 1.0
    np.testing.assert_array_equal(curve.values[1:, 0], 0.0)
    with pytest.raises(DataError):
        acf(TimeSeries(data, 1.0), 50)


def test_lag1_of_white_noise_is_small(rng):
    values = rng.standard_normal((20_000, 3))
    assert np.all(np.abs(lag1_autocorrelation(values)) < 0.05)
    assert lag1_autocorrelation(np.ones(10))[0] == 0.0


def test_pdf1d_is_normalized(rng):
    ts = TimeSeries(rng.standard_normal(5000), 1.0)
    hist = pdf1d(ts, 0, bins=40)
    assert hist.integral() == pytest.approx(1.0)
    assert hist.edges[0] < ts.data.min() and hist.edges[-1] > ts.data.max()


def test_pdf2d_is_normalized(rng):
    ts = TimeSeries(rng.standard_normal((3000, 2)), 1.0, ("a", "b"))
    hist = pdf2d(ts, 0, 1, bins=12)
    assert hist.density.shape == (12, 12)
    assert hist.names == ("a", "b")
    assert hist.integral() == pytest.approx(1.0)


def test_pdf_l1_distance(rng):
    a = TimeSeries(rng.standard_normal(4000), 1.0)
    shifted = TimeSeries(a.data + 10.0, 1.0)
    assert pdf_l1_distance(a, a, 0) == pytest.approx(0.0)
    assert pdf_l1_distance(a, shifted, 0, bins=50) == pytest.approx(2.0)


def test_paired_acf_errors(rng):
    ts = TimeSeries(rng.standard_normal((500, 2)), 1.0)
    curve = acf(ts, 10)
    np.testing.assert_array_equal(acf_max_deviation(curve, curve), [0.0, 0.0])
    np.testing.assert_array_equal(acf_rms_error(curve, curve), [0.0, 0.0])


def test_pearson():
    x = np.linspace(0.0, 1.0, 30)
    assert pearson(x, 2.0 * x + 1.0) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    with pytest.raises(DataError, match="constant"):
        pearson(x, np.ones_like(x))
    with pytest.raises(DataError):
        pearson(x, x[:-1])


def test_variance_is_unbiased():
    ts = TimeSeries(np.array([1.0, 2.0, 3.0, 4.0]), 1.0)
    assert variance_by_channel(ts)[0] == pytest.approx(5.0 / 3.0)


def test_eof_of_rank_one_field(rng):
    s = rng.standard_normal(300)
    field = np.column_stack([s, 2.0 * s, -s]) + np.array([1.0, 0.0, 3.0])
    pcs, basis = eof_compress(TimeSeries(field, 0.1), 1)
    assert pcs.names == ("pc1",)
    assert basis.discarded_variance == pytest.approx(0.0, abs=1e-10)
    assert basis.explained_variance[0] == pytest.approx(basis.total_variance)
    np.testing.assert_allclose(np.linalg.norm(basis.modes[:, 0]), 1.0)
    # largest loading is positive
    assert basis.modes[np.argmax(np.abs(basis.modes[:, 0])), 0] > 0
    np.testing.assert_allclose(eof_reconstruct(pcs, basis), field, atol=1e-10)
    with pytest.raises(DataError):
        eof_compress(TimeSeries(field, 0.1), 4)


def test_acf_of_ar1_decays_geometrically(rng):
    phi, n = 0.8, 200_000
    noise = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = noise[0] / np.sqrt(1.0 - phi ** 2)
    for k in range(1, n):
        x[k] = phi * x[k - 1] + noise[k]
    curve = acf(TimeSeries(x, 1.0), 5)
    np.testing.assert_allclose(curve.values[:, 0], phi ** np.arange(6), atol=0.02)


def test_eof_keeping_every_mode_reconstructs_exactly(rng):
    field = rng.standard_normal((200, 4)) @ rng.standard_normal((4, 4)) + 5.0
    pcs, basis = eof_compress(TimeSeries(field, 1.0), 4)
    assert basis.discarded_variance == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(eof_reconstruct(pcs, basis), field, atol=1e-10)


def test_eof_recovers_known_covariance_spectrum(rng):
    n, variances = 500, np.array([4.0, 2.0, 1.0, 0.5])
    centered = rng.standard_normal((n, 4))
    centered -= centered.mean(axis=0)
    # orthonormal zero-mean columns give a sample covariance of exactly R diag(variances) R^T
    scores, _ = np.linalg.qr(centered)
    scores *= np.sqrt((n - 1) * variances)
    rotation, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    _, basis = eof_compress(TimeSeries(scores @ rotation.T, 1.0), 4)
    np.testing.assert_allclose(basis.explained_variance, variances, rtol=1e-10)
    np.testing.assert_allclose(np.abs(basis.modes.T @ rotation), np.eye(4), atol=1e-10)


def test_pearson_is_affine_invariant(rng):
    x, y = rng.standard_normal(1000), rng.standard_normal(1000)
    y += 0.5 * x
    rho = pearson(x, y)
    assert pearson(3.0 * x - 7.0, 0.25 * y + 11.0) == pytest.approx(rho, abs=1e-12)
    assert pearson(-2.0 * x + 1.0, y) == pytest.approx(-rho, abs=1e-12)
