import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from banlab.ingest import RiderHistory, hr_percentile
from banlab.metrics import (
    HrPowerFit,
    MetricError,
    MetricOptions,
    MetricSeries,
    build_metric_series,
    canonical_kind,
    critical_power_curve,
    fit_critical_power,
    fit_hr_power,
    fit_log_log,
    hr_at_power,
    lagged_pairs,
    max_power_metric,
    mean_maximal_power,
    mmp_curve,
    power_at_hr,
    power_duration_pairs,
    PowerDurationPairs,
)

from conftest import make_hr_history, make_session


def manual_fit(a=60.0, b=0.3, c=1e-5, cov=None):
    cov = np.zeros((3, 3)) if cov is None else cov
    return HrPowerFit([1], np.array([a]), np.array([b]), c, 9.0, cov, 15, 100)


def brute_window_max(p, w):
    sums = np.convolve(p, np.ones(w), mode="valid")
    return sums.max() / w


# ---------------------------------------------------------------- heart rate


def test_zero_noise_recovery():
    a = [55.0, 62.0, 70.0]
    b = [0.31, 0.28, 0.35]
    h = make_hr_history(a, b, 2e-5, n_samples=800)
    fit = fit_hr_power(h)
    np.testing.assert_allclose(fit.a, a, rtol=1e-8)
    np.testing.assert_allclose(fit.b, b, rtol=1e-8)
    assert fit.c == pytest.approx(2e-5, rel=1e-8)
    assert fit.tau_sq < 1e-12


def test_default_lag_is_three_samples():
    s = make_session(np.arange(20.0), hr=np.arange(20.0) + 100)
    hr, p, t = lagged_pairs(s)
    assert hr.size == 17
    np.testing.assert_array_equal(hr - 100, p + 3)
    assert t[0] == 15.0


def test_lag_must_match_interval():
    s = make_session(np.arange(20.0), hr=np.arange(20.0) + 100)
    with pytest.raises(MetricError, match="multiple"):
        lagged_pairs(s, lag_s=7)


def test_lagged_pairs_skip_gaps():
    t = np.concatenate([np.arange(10) * 5, 100 + np.arange(10) * 5])
    s = make_session(np.arange(20.0), hr=np.full(20, 120.0), t=t)
    hr, p, tt = lagged_pairs(s)
    assert hr.size == 14
    assert 100.0 not in tt and 110.0 not in tt


def test_covariance_matches_dense_oracle():
    h = make_hr_history([60, 65, 58], [0.3, 0.25, 0.33], 1e-5, n_samples=300, noise_sd=3.0, seed=4)
    fit = fit_hr_power(h)
    # dense design matrix solved directly
    blocks, ys = [], []
    n = len(h.sessions)
    for k, s in enumerate(h.sessions):
        hr, p, t = lagged_pairs(s)
        X = np.zeros((hr.size, 2 * n + 1))
        X[:, k] = 1
        X[:, n + k] = p
        X[:, 2 * n] = s.temperature * t
        blocks.append(X)
        ys.append(hr)
    X = np.vstack(blocks)
    y = np.concatenate(ys)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    N = y.size
    cov = (r @ r) / (N - X.shape[1]) * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(np.concatenate([fit.a, fit.b, [fit.c]]), coef, rtol=1e-9)
    np.testing.assert_allclose(fit.covariance, cov, rtol=1e-6, atol=1e-14)
    assert fit.tau_sq == pytest.approx((r @ r) / N, rel=1e-9)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > -1e-12)


def test_single_session_frozen_drift_is_simple_regression():
    h = make_hr_history([60.0], [0.3], 0.0, n_samples=500, noise_sd=2.0, seed=8)
    fit = fit_hr_power(h, fit_drift=False)
    hr, p, _ = lagged_pairs(h.sessions[0])
    coef, *_ = np.linalg.lstsq(np.column_stack([np.ones_like(p), p]), hr, rcond=None)
    assert fit.a[0] == pytest.approx(coef[0], abs=1e-10)
    assert fit.b[0] == pytest.approx(coef[1], abs=1e-10)
    assert fit.c == 0.0


def test_single_session_with_drift_rejected():
    h = make_hr_history([60.0], [0.3], 0.0, n_samples=200)
    with pytest.raises(MetricError, match="at least 2"):
        fit_hr_power(h)


def test_constant_power_session_excluded():
    h = make_hr_history([60, 61, 62], [0.3, 0.3, 0.3], 1e-5, n_samples=200, seed=2)
    s = h.sessions[1]
    flat = type(s)(s.session_index, s.day_number, s.temperature, s.t, np.full(len(s.t), 200.0), s.hr, s.sampling_interval)
    h2 = RiderHistory("x", (h.sessions[0], flat, h.sessions[2]))
    fit = fit_hr_power(h2)
    assert fit.session_indices == [1, 3]
    assert fit.excluded == {2: "rank-deficient"}


def test_drift_coverage_four_se():
    hits = 0
    for rep in range(100):
        h = make_hr_history([60, 65], [0.3, 0.28], 1e-5, n_samples=2000, noise_sd=3.0, seed=1000 + rep)
        fit = fit_hr_power(h)
        se = math.sqrt(fit.covariance[-1, -1])
        hits += abs(fit.c - 1e-5) <= 4 * se
    assert hits >= 95


def test_power_at_hr_example():
    v, lam = power_at_hr(manual_fit(), 1, 150.0)
    assert v == pytest.approx(297.6, abs=1e-9)
    assert lam == 0.0


def test_power_at_hr_degenerate_slope():
    with pytest.raises(MetricError, match="degenerate"):
        power_at_hr(manual_fit(b=1e-12), 1, 150.0)


def test_hr_at_power_examples():
    assert hr_at_power(manual_fit(), 1, 300.0)[0] == pytest.approx(150.72, abs=1e-9)
    assert hr_at_power(manual_fit(a=64.0, c=0.0), 1, 0.0)[0] == 64.0
    assert hr_at_power(manual_fit(a=70.0), 1, 300.0)[0] > hr_at_power(manual_fit(a=60.0), 1, 300.0)[0]


def test_unknown_session():
    with pytest.raises(MetricError, match="session 9"):
        power_at_hr(manual_fit(), 9, 150.0)


def test_delta_method_vs_simulation():
    h = make_hr_history([60, 65, 70], [0.3, 0.27, 0.32], 1e-5, n_samples=1000, noise_sd=3.0, seed=11)
    fit = fit_hr_power(h)
    rng = np.random.default_rng(5)
    for sid in fit.session_indices:
        theta = np.array(fit.coefficients(sid))
        draws = rng.multivariate_normal(theta, fit.covariance_block(sid), size=10000)
        h_q = 160.0
        sim = (h_q - draws[:, 0] - draws[:, 2] * 72000.0) / draws[:, 1]
        _, lam = power_at_hr(fit, sid, h_q)
        assert abs(lam / sim.var() - 1) < 0.1


@given(st.integers(0, 10_000), st.floats(100, 200), st.floats(0, 500))
def test_phq_hpq_consistency(seed, h_q, p_q):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    f = manual_fit(rng.uniform(40, 80), rng.uniform(0.1, 0.5), rng.uniform(-1e-4, 1e-4), A @ A.T * 1e-3)
    p, lam_p = power_at_hr(f, 1, h_q)
    assert hr_at_power(f, 1, p)[0] == pytest.approx(h_q, rel=1e-12)
    assert lam_p >= 0 and math.isfinite(lam_p)
    assert hr_at_power(f, 1, p_q)[1] >= 0


# ---------------------------------------------------------------- power-duration


def test_mmp_examples():
    s = make_session([100, 100, 200, 200, 200, 100])
    assert mean_maximal_power(s, 15) == 200
    assert mean_maximal_power(s, 20) == 175
    assert mean_maximal_power(s, 30) == pytest.approx(150)


def test_mmp_errors():
    s = make_session([100, 100, 200])
    with pytest.raises(MetricError):
        mean_maximal_power(s, 7)
    with pytest.raises(MetricError, match="no segment"):
        mean_maximal_power(s, 20)


@given(st.floats(0, 2000), st.integers(1, 40))
def test_mmp_constant(c, w):
    s = make_session(np.full(40, c))
    assert mean_maximal_power(s, 5 * w) == pytest.approx(c, rel=1e-12, abs=1e-9)


def test_mmp_respects_segments():
    p = np.array([300, 300, 0, 0, 300, 300], dtype=float)
    t = np.array([0, 5, 10, 100, 105, 110], dtype=float)
    gapped = make_session(p[[0, 1, 4, 5]], t=t[[0, 1, 4, 5]])
    assert mean_maximal_power(gapped, 10) == 300
    with pytest.raises(MetricError):
        mean_maximal_power(gapped, 15)


def test_mmp_not_monotone_in_duration():
    # a longer window can have a higher best mean when it is not a multiple
    s = make_session([100, 0, 100])
    assert mean_maximal_power(s, 15) > mean_maximal_power(s, 10)


@given(st.lists(st.integers(0, 1500), min_size=2, max_size=120), st.data())
def test_mmp_multiples_and_oracle(p, data):
    p = np.array(p, dtype=float)
    s = make_session(p)
    w = data.draw(st.integers(1, len(p)))
    assert mean_maximal_power(s, 5 * w) == brute_window_max(p, w)
    k = data.draw(st.integers(1, max(1, len(p) // w)))
    assert mean_maximal_power(s, 5 * w * k) <= mean_maximal_power(s, 5 * w)


def test_mmp_curve_matches_pointwise():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 900, size=150).astype(float)
    s = make_session(p)
    curve = mmp_curve(s)
    assert np.isnan(curve[0])
    for w in range(1, 151):
        assert curve[w] == mean_maximal_power(s, 5 * w)


def test_duration_map_brute_force_monotone_session():
    rng = np.random.default_rng(3)
    p = np.sort(rng.integers(80, 1100, size=200))[::-1].astype(float)
    s = make_session(p)
    pairs = power_duration_pairs(s)
    assert np.all(np.diff(pairs.power) > 0)
    assert np.all(np.diff(pairs.duration) < 0)
    for pk, dk in zip(pairs.power, pairs.duration):
        longest = max(w for w in range(1, len(p) + 1) if brute_window_max(p, w) >= pk)
        assert dk == 5 * longest
    assert pairs.duration.min() >= 10


def test_log_log_exact():
    d = np.array([10.0, 30, 60, 120, 300])
    pairs = PowerDurationPairs(np.exp(5 - 0.1 * np.log(d)), d)
    f = fit_log_log(pairs)
    assert f.a == pytest.approx(5, abs=1e-12)
    assert f.b == pytest.approx(-0.1, abs=1e-12)
    assert f.predict(10) == pytest.approx(math.exp(5) * 10**-0.1, rel=1e-12)
    assert np.allclose(f.covariance, 0, atol=1e-20)
    assert f.flag is None


def test_log_log_needs_three_pairs():
    with pytest.raises(MetricError, match="insufficient"):
        fit_log_log(PowerDurationPairs(np.array([300.0, 200]), np.array([60.0, 30])))


def test_max_power_metric_runs():
    rng = np.random.default_rng(1)
    p = np.clip(rng.normal(220, 60, size=720), 0, None).round()
    v, lam = max_power_metric(make_session(p), 10)
    assert v > 220 and lam > 0


def test_critical_power_exact():
    d = np.array([10.0, 30, 60, 120, 300])
    pairs = PowerDurationPairs(critical_power_curve(d, 800, 250, 0.05)[::-1], d[::-1])
    f = fit_critical_power(pairs)
    assert f.p0 == pytest.approx(800, rel=1e-6)
    assert f.p_inf == pytest.approx(250, rel=1e-6)
    assert f.theta == pytest.approx(0.05, rel=1e-6)


def test_critical_power_asymptote():
    rng = np.random.default_rng(2)
    d = np.arange(10.0, 610, 10)
    p = critical_power_curve(d, 900, 260, 0.2) + rng.normal(0, 3, d.size)
    f = fit_critical_power(PowerDurationPairs(p, d))
    assert abs(critical_power_curve(d.max(), f.p0, f.p_inf, f.theta) - 260) < 5.0


def test_critical_power_needs_four_pairs():
    with pytest.raises(MetricError, match="insufficient"):
        fit_critical_power(PowerDurationPairs(np.array([300.0, 250, 200]), np.array([60.0, 30, 10])))


def test_critical_power_coverage():
    d = np.arange(10.0, 610, 10)
    rng = np.random.default_rng(77)
    hits = 0
    for _ in range(100):
        p = critical_power_curve(d, 800, 250, 0.05) + rng.normal(0, 10, d.size)
        f = fit_critical_power(PowerDurationPairs(p, d))
        hits += abs(f.p0 - 800) <= 1.96 * math.sqrt(f.covariance[0, 0])
    assert 85 <= hits <= 99


# ---------------------------------------------------------------- series


def ten_session_history(noise_sd=2.0, seed=0):
    a = np.linspace(70, 55, 10)
    return make_hr_history(a, np.full(10, 0.3), 1e-5, n_samples=400, noise_sd=noise_sd, seed=seed)


def test_series_ten_sessions():
    m = build_metric_series(ten_session_history(), "phq")
    assert m.kind == "power_at_hr"
    assert m.n == 10
    assert np.all(m.variances > 0)
    assert m.info["h_q"] == hr_percentile(ten_session_history(), 75)
    np.testing.assert_array_equal(m.session_indices, np.arange(1, 11))


def test_series_drops_constant_session():
    h = ten_session_history()
    s = h.sessions[3]
    flat = type(s)(4, s.day_number, s.temperature, s.t, np.full(len(s.t), 180.0), s.hr, 5)
    h2 = RiderHistory("x", h.sessions[:3] + (flat,) + h.sessions[4:])
    m = build_metric_series(h2, "power_at_hr")
    assert 4 not in m.session_indices
    assert m.omitted[4] == "rank-deficient"


def test_series_hpq_default_threshold():
    h = ten_session_history()
    m = build_metric_series(h, "hpq")
    assert m.info["p_q"] == pytest.approx(np.percentile(h.pooled_power, 75))


def test_series_power_duration_kinds():
    rng = np.random.default_rng(9)
    sessions = []
    for k in range(4):
        p = np.clip(rng.normal(230, 80, size=600), 0, None).round()
        sessions.append(make_session(p, index=k + 1, day=2 * k + 1))
    h = RiderHistory("pd", tuple(sessions))
    pd = build_metric_series(h, "pd", MetricOptions(d_s=300))
    assert pd.n == 4 and pd.info["d_s"] == 300
    p0 = build_metric_series(h, "p0")
    assert p0.n + len(p0.omitted) == 4


def test_lambda_grows_with_threshold():
    h = ten_session_history(noise_sd=3.0, seed=21)
    fit = fit_hr_power(h)
    mean_hr = max(float(np.nanmean(s.hr)) for s in h.sessions)
    thresholds = [hr_percentile(h, q) for q in np.linspace(60, 90, 13)]
    thresholds = [x for x in thresholds if x > mean_hr]
    assert len(thresholds) >= 3
    means = [build_metric_series(h, "phq", MetricOptions(h_q=x), hr_fit=fit).variances.mean() for x in thresholds]
    assert np.all(np.diff(means) >= 0)


def test_series_no_usable_sessions():
    h = RiderHistory("x", (make_session([100.0] * 50, index=1), make_session([100.0] * 50, index=2, day=2)))
    with pytest.raises(MetricError):
        build_metric_series(h, "pd")


def test_series_validation_and_csv(tmp_path):
    with pytest.raises(MetricError):
        MetricSeries("power_at_hr", [1.0], [0.0], [1], [1])
    m = MetricSeries("peak_power", [1.5, 2.25], [0.1, 1e-12], [1, 3], [2, 9])
    m.to_csv(tmp_path / "m.csv")
    back = MetricSeries.from_csv(tmp_path / "m.csv", "p0")
    np.testing.assert_array_equal(back.values, m.values)
    np.testing.assert_array_equal(back.variances, m.variances)
    np.testing.assert_array_equal(back.days, m.days)
    assert back.kind == "peak_power"


def test_kind_aliases():
    assert canonical_kind("pd") == "max_power_d"
    assert canonical_kind("hr_at_power") == "hr_at_power"
    with pytest.raises(MetricError):
        canonical_kind("vo2")
