"""Per-session performance metrics and their measurement variances.

Four metrics are supported:

``power_at_hr`` (``phq``)
    power at a heart-rate threshold, from the pooled heart-rate/power model
    ``H_it = a_i + b_i P_{i,t-l} + c T_i t + e``.
``hr_at_power`` (``hpq``)
    heart rate needed to hold a power threshold, from the same model.
``max_power_d`` (``pd``)
    power sustainable for ``d`` seconds from a log-log power-duration fit.
``peak_power`` (``p0``)
    peak power of an exponential critical-power curve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .ingest import RiderHistory, SessionRecord, hr_percentile, power_percentile

DEFAULT_LAG_S = 15
REFERENCE_TEMPERATURE_C = 20.0
REFERENCE_TIME_S = 3600.0
LAMBDA_FLOOR = 1e-12
MIN_PAIRS_PER_SESSION = 10

KIND_ALIASES = {
    "phq": "power_at_hr",
    "hpq": "hr_at_power",
    "pd": "max_power_d",
    "p0": "peak_power",
}
KINDS = tuple(KIND_ALIASES.values())


class MetricError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise MetricError(f"unknown metric kind {kind!r}")
    return kind


# --------------------------------------------------------------------------
# heart rate vs lagged power


@dataclass
class HrPowerFit:
    """Joint least-squares (= normal MLE) fit of heart rate on lagged power.

    Coefficient order in ``covariance`` is ``(a_1..a_n, b_1..b_n, c)`` over the
    usable sessions listed in ``session_indices``.
    """

    session_indices: list[int]
    a: np.ndarray
    b: np.ndarray
    c: float
    tau_sq: float
    covariance: np.ndarray
    lag_s: int
    n_obs: int
    fit_drift: bool = True
    excluded: dict[int, str] = field(default_factory=dict)
    flags: dict[int, str] = field(default_factory=dict)

    def position(self, session_index: int) -> int:
        try:
            return self.session_indices.index(session_index)
        except ValueError:
            reason = self.excluded.get(session_index, "not in fit")
            raise MetricError(f"session {session_index} unusable: {reason}") from None

    def coefficients(self, session_index: int) -> tuple[float, float, float]:
        k = self.position(session_index)
        return float(self.a[k]), float(self.b[k]), float(self.c)

    def covariance_block(self, session_index: int) -> np.ndarray:
        """3x3 covariance of ``(a_i, b_i, c)``."""
        k = self.position(session_index)
        n = len(self.session_indices)
        idx = [k, n + k, 2 * n]
        return self.covariance[np.ix_(idx, idx)]


def lagged_pairs(session: SessionRecord, lag_s: int = DEFAULT_LAG_S):
    """(hr_t, power_{t-l}, t) triples inside segments; samples lacking HR are skipped."""
    if lag_s % session.sampling_interval:
        raise MetricError(
            f"lag {lag_s} s is not a multiple of the {session.sampling_interval} s interval"
        )
    shift = lag_s // session.sampling_interval
    hr, p, t = [], [], []
    for seg in session.segments:
        lo, hi = seg.start, seg.stop
        if hi - lo <= shift:
            continue
        hr.append(session.hr[lo + shift : hi])
        p.append(session.power[lo : hi - shift])
        t.append(session.t[lo + shift : hi])
    if not hr:
        return np.empty(0), np.empty(0), np.empty(0)
    hr, p, t = (np.concatenate(x) for x in (hr, p, t))
    keep = ~np.isnan(hr)
    return hr[keep], p[keep], t[keep]


def _simple_regression(x, y):
    """Intercept, slope and residuals of y on [1, x] (centred for stability)."""
    xm, ym = x.mean(), y.mean()
    xc = x - xm
    sxx = float(xc @ xc)
    slope = float(xc @ (y - ym)) / sxx
    resid = (y - ym) - slope * xc
    return ym - slope * xm, slope, resid, xm, sxx


def fit_hr_power(
    history: RiderHistory,
    lag_s: int = DEFAULT_LAG_S,
    fit_drift: bool = True,
) -> HrPowerFit:
    """Fit per-session intercepts and slopes plus one shared drift coefficient.

    The per-session blocks are partialled out (Frisch-Waugh) so the shared
    drift coefficient comes from a scalar regression on residualised drift
    regressors; the full covariance is assembled from the block structure.
    """
    excluded: dict[int, str] = {}
    rows = []
    for s in history.sessions:
        if not s.has_hr:
            excluded[s.session_index] = "no heart-rate data"
            continue
        hr, p, t = lagged_pairs(s, lag_s)
        if hr.size < MIN_PAIRS_PER_SESSION:
            excluded[s.session_index] = "too few lagged pairs"
            continue
        if np.ptp(p) <= 1e-9 * max(1.0, float(np.abs(p).mean())):
            excluded[s.session_index] = "rank-deficient"
            continue
        rows.append((s, hr, p, s.temperature * t))

    min_sessions = 2 if fit_drift else 1
    if len(rows) < min_sessions:
        raise MetricError(
            f"need at least {min_sessions} usable sessions for the heart-rate fit, got {len(rows)}"
        )

    n = len(rows)
    parts = []
    szz = 0.0
    szy = 0.0
    for s, hr, p, z in rows:
        ay, by, ry, pm, sxx = _simple_regression(p, hr)
        az, bz, rz, _, _ = _simple_regression(p, z)
        szz += float(rz @ rz)
        szy += float(rz @ ry)
        parts.append((ay, by, ry, az, bz, rz, pm, sxx, hr.size))

    if fit_drift and szz <= 0:
        raise MetricError("drift regressor is collinear with the session terms")
    c = szy / szz if fit_drift else 0.0

    a = np.empty(n)
    b = np.empty(n)
    rss = 0.0
    n_obs = 0
    for k, (ay, by, ry, az, bz, rz, *_rest) in enumerate(parts):
        a[k] = ay - c * az
        b[k] = by - c * bz
        r = ry - c * rz
        rss += float(r @ r)
        n_obs += ry.size

    n_coef = 2 * n + (1 if fit_drift else 0)
    if n_obs <= n_coef:
        raise MetricError("not enough observations for the heart-rate fit")
    tau_sq = rss / n_obs
    s2 = rss / (n_obs - n_coef)

    cov = np.zeros((2 * n + 1, 2 * n + 1))
    g = np.zeros((n, 2))
    for k, (_, _, _, az, bz, _, pm, sxx, m) in enumerate(parts):
        cov[k, k] = s2 * (1.0 / m + pm * pm / sxx)
        cov[n + k, n + k] = s2 / sxx
        cov[k, n + k] = cov[n + k, k] = -s2 * pm / sxx
        g[k] = az, bz
    if fit_drift:
        var_c = s2 / szz
        idx = np.concatenate([np.arange(n), np.arange(n, 2 * n)])
        gvec = np.concatenate([g[:, 0], g[:, 1]])
        cov[np.ix_(idx, idx)] += var_c * np.outer(gvec, gvec)
        cov[idx, 2 * n] = cov[2 * n, idx] = -var_c * gvec
        cov[2 * n, 2 * n] = var_c

    flags = {s.session_index: "non-positive slope" for (s, *_), bk in zip(rows, b) if bk <= 0}
    return HrPowerFit(
        session_indices=[r[0].session_index for r in rows],
        a=a,
        b=b,
        c=c,
        tau_sq=tau_sq,
        covariance=cov,
        lag_s=lag_s,
        n_obs=n_obs,
        fit_drift=fit_drift,
        excluded=excluded,
        flags=flags,
    )


def power_at_hr(
    fit: HrPowerFit,
    session_index: int,
    h_q: float,
    T_R: float = REFERENCE_TEMPERATURE_C,
    t_R: float = REFERENCE_TIME_S,
) -> tuple[float, float]:
    """Power at heart rate ``h_q`` and its delta-method variance."""
    a, b, c = fit.coefficients(session_index)
    if abs(b) < 1e-9:
        raise MetricError(f"session {session_index}: degenerate slope {b}")
    ref = T_R * t_R
    value = (h_q - a - c * ref) / b
    grad = np.array([-1.0 / b, -value / b, -ref / b])
    lam = float(grad @ fit.covariance_block(session_index) @ grad)
    return value, lam


def hr_at_power(
    fit: HrPowerFit,
    session_index: int,
    p_q: float,
    T_R: float = REFERENCE_TEMPERATURE_C,
    t_R: float = REFERENCE_TIME_S,
) -> tuple[float, float]:
    a, b, c = fit.coefficients(session_index)
    ref = T_R * t_R
    v = np.array([1.0, p_q, ref])
    return a + b * p_q + c * ref, float(v @ fit.covariance_block(session_index) @ v)


# --------------------------------------------------------------------------
# power-duration metrics


def _window_count(session: SessionRecord, d: float) -> int:
    w = d / session.sampling_interval
    if d <= 0 or not float(w).is_integer():
        raise MetricError(
            f"duration {d} s is not a positive multiple of {session.sampling_interval} s"
        )
    return int(w)


def mean_maximal_power(session: SessionRecord, d: float) -> float:
    """Highest mean power over any within-segment window lasting ``d`` seconds."""
    w = _window_count(session, d)
    best = -math.inf
    for seg in session.segments:
        p = session.power[seg]
        if len(p) < w:
            continue
        cs = np.concatenate([[0.0], np.cumsum(p)])
        best = max(best, float(np.max(cs[w:] - cs[:-w])))
    if best == -math.inf:
        raise MetricError(f"session {session.session_index}: no segment lasts {d} s")
    return best / w


def mmp_curve(session: SessionRecord) -> np.ndarray:
    """Mean-maximal power for every window length.

    Element ``w`` is the best mean over windows of ``w`` samples (NaN at 0 and
    for lengths no segment reaches).
    """
    longest = max(seg.stop - seg.start for seg in session.segments)
    best_sum = np.full(longest + 1, -np.inf)
    for seg in session.segments:
        p = session.power[seg]
        cs = np.concatenate([[0.0], np.cumsum(p)])
        for w in range(1, len(p) + 1):
            m = float(np.max(cs[w:] - cs[:-w]))
            if m > best_sum[w]:
                best_sum[w] = m
    curve = np.full(longest + 1, np.nan)
    lengths = np.arange(1, longest + 1)
    curve[1:] = best_sum[1:] / lengths
    return curve


@dataclass
class PowerDurationPairs:
    power: np.ndarray  # p_k, watts, increasing
    duration: np.ndarray  # d_k, seconds


def power_duration_pairs(
    session: SessionRecord,
    p_min: float = 50.0,
    p_step: float = 10.0,
    min_duration_s: float = 10.0,
    curve: np.ndarray | None = None,
) -> PowerDurationPairs:
    """Longest sustained duration for each power on a fixed grid.

    A power is sustained for ``d`` seconds when some window of that length has
    mean power at least that high.  Durations under ``min_duration_s`` are
    dropped, and of several powers sharing a duration only the largest is kept.
    """
    curve = mmp_curve(session) if curve is None else curve
    top = np.nanmax(curve)
    grid = np.arange(p_min, top + 1e-9, p_step)
    lengths = np.arange(len(curve))
    valid = ~np.isnan(curve)
    powers, durations = [], []
    for pk in grid:
        ok = lengths[valid & (curve >= pk)]
        if ok.size == 0:
            continue
        dk = ok.max() * session.sampling_interval
        if dk < min_duration_s:
            continue
        if durations and durations[-1] == dk:
            powers[-1] = pk
        else:
            powers.append(pk)
            durations.append(dk)
    return PowerDurationPairs(np.array(powers, dtype=float), np.array(durations, dtype=float))


@dataclass
class LogLogFit:
    a: float
    b: float
    covariance: np.ndarray
    flag: str | None = None

    def predict(self, d: float) -> float:
        return math.exp(self.a) * d**self.b


def fit_log_log(pairs: PowerDurationPairs) -> LogLogFit:
    m = len(pairs.power)
    if m < 3:
        raise MetricError(f"insufficient data: {m} power-duration pairs, need 3")
    X = np.column_stack([np.ones(m), np.log(pairs.duration)])
    y = np.log(pairs.power)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / (m - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    flag = "positive slope" if coef[1] > 0 else None
    return LogLogFit(float(coef[0]), float(coef[1]), cov, flag)


def max_power_metric(session: SessionRecord, d: float = 10.0, **grid) -> tuple[float, float]:
    """Estimated maximum power over ``d`` seconds and its delta-method variance."""
    fit = fit_log_log(power_duration_pairs(session, **grid))
    value = fit.predict(d)
    u = np.array([1.0, math.log(d)])
    return value, value * value * float(u @ fit.covariance @ u)


@dataclass
class CriticalPowerFit:
    p0: float
    p_inf: float
    theta: float
    covariance: np.ndarray  # over (p0, p_inf, theta)
    rss: float
    n_iter: int


def critical_power_curve(d, p0: float, p_inf: float, theta: float):
    return (p0 - p_inf) * np.exp(-theta * np.asarray(d, dtype=float)) + p_inf


def fit_critical_power(pairs: PowerDurationPairs, max_iter: int = 2000) -> CriticalPowerFit:
    """Least-squares fit of ``p = (p0 - p_inf) exp(-theta d) + p_inf``.

    Searched over logs of ``(p0 - p_inf, p_inf, theta)`` with Nelder-Mead.  The
    covariance is the inverse observed information of the normal likelihood.
    """
    d, p = pairs.duration, pairs.power
    m = len(p)
    if m < 4:
        raise MetricError(f"insufficient data: {m} power-duration pairs, need 4")
    scale = float(np.max(p))

    def rss(phi):
        gap, p_inf, theta = np.exp(phi)
        r = p - (gap * np.exp(-theta * d) + p_inf)
        return float(r @ r) / scale**2

    x0 = np.log([np.max(p) - np.min(p), np.min(p), 1.0 / np.median(d)])
    used = 0
    res = None
    # restart from the last vertex until the simplex stops moving
    while used < max_iter:
        res = minimize(
            rss, x0, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": max_iter - used},
        )
        used += res.nit
        if not res.success:
            break
        if np.max(np.abs(res.x - x0)) < 1e-9:
            break
        x0 = res.x
    if res is None or not res.success:
        raise MetricError(f"critical-power fit did not converge in {max_iter} iterations")

    gap, p_inf, theta = np.exp(res.x)
    p0 = gap + p_inf
    e = np.exp(-theta * d)
    resid = p - (gap * e + p_inf)
    J = np.column_stack([e, 1.0 - e, -gap * d * e])
    # second derivatives of the curve w.r.t. (p0, p_inf, theta)
    H2 = np.zeros((3, 3))
    H2[0, 2] = H2[2, 0] = float(resid @ (-d * e))
    H2[1, 2] = H2[2, 1] = float(resid @ (d * e))
    H2[2, 2] = float(resid @ (gap * d * d * e))
    rss_nat = float(resid @ resid)
    s2 = rss_nat / (m - 3)
    info = J.T @ J - H2
    if s2 == 0:
        cov = np.zeros((3, 3))
    else:
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise MetricError("critical-power information matrix is not positive definite") from None
        cov = s2 * np.linalg.inv(info)
    return CriticalPowerFit(p0, p_inf, theta, cov, rss_nat, used)


def peak_power_metric(session: SessionRecord, **grid) -> tuple[float, float]:
    fit = fit_critical_power(power_duration_pairs(session, **grid))
    return fit.p0, float(fit.covariance[0, 0])


# --------------------------------------------------------------------------
# metric series


@dataclass(eq=False)
class MetricSeries:
    kind: str
    values: np.ndarray
    variances: np.ndarray
    session_indices: np.ndarray
    days: np.ndarray
    omitted: dict[int, str] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        self.session_indices = np.asarray(self.session_indices, dtype=int)
        self.days = np.asarray(self.days, dtype=int)
        n = len(self.values)
        if not (len(self.variances) == len(self.session_indices) == len(self.days) == n):
            raise MetricError("metric series columns have different lengths")
        if np.any(~np.isfinite(self.values)):
            raise MetricError("metric values must be finite")
        if np.any(~np.isfinite(self.variances)) or np.any(self.variances <= 0):
            raise MetricError("metric variances must be positive and finite")
        if np.any(self.days < 1):
            raise MetricError("session days start at 1")

    @property
    def n(self) -> int:
        return len(self.values)

    def replace(self, values=None, variances=None) -> "MetricSeries":
        return MetricSeries(
            self.kind,
            self.values if values is None else values,
            self.variances if variances is None else variances,
            self.session_indices,
            self.days,
            dict(self.omitted),
            dict(self.info),
        )

    def subset(self, rows) -> "MetricSeries":
        rows = np.asarray(rows)
        return MetricSeries(
            self.kind,
            self.values[rows],
            self.variances[rows],
            self.session_indices[rows],
            self.days[rows],
            dict(self.omitted),
            dict(self.info),
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["session", "day", "value", "lambda"])
            for i, d, v, lam in zip(self.session_indices, self.days, self.values, self.variances):
                w.writerow([int(i), int(d), repr(float(v)), repr(float(lam))])

    @classmethod
    def from_csv(cls, path, kind: str = "power_at_hr") -> "MetricSeries":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise MetricError(f"{path}: no metric rows")
        return cls(
            canonical_kind(kind),
            [float(r["value"]) for r in rows],
            [float(r["lambda"]) for r in rows],
            [int(r["session"]) for r in rows],
            [int(r["day"]) for r in rows],
        )


@dataclass
class MetricOptions:
    lag_s: int = DEFAULT_LAG_S
    h_q: float | None = None
    hq_pct: float = 75.0
    p_q: float | None = None
    pq_pct: float = 75.0
    d_s: float = 10.0
    T_R: float = REFERENCE_TEMPERATURE_C
    t_R: float = REFERENCE_TIME_S
    fit_drift: bool = True


def build_metric_series(
    history: RiderHistory,
    kind: str,
    options: MetricOptions | None = None,
    hr_fit: HrPowerFit | None = None,
) -> MetricSeries:
    """Apply one metric estimator to every session of a rider."""
    kind = canonical_kind(kind)
    opts = options or MetricOptions()
    values, lams, idx, days = [], [], [], []
    omitted: dict[int, str] = {}
    info: dict = {"kind": kind}

    if kind in ("power_at_hr", "hr_at_power"):
        fit = hr_fit or fit_hr_power(history, opts.lag_s, fit_drift=opts.fit_drift)
        omitted.update(fit.excluded)
        if kind == "power_at_hr":
            threshold = opts.h_q if opts.h_q is not None else hr_percentile(history, opts.hq_pct)
            info["h_q"] = threshold
            estimator = power_at_hr
        else:
            threshold = opts.p_q if opts.p_q is not None else power_percentile(history, opts.pq_pct)
            info["p_q"] = threshold
            estimator = hr_at_power
        info.update(c=fit.c, tau_sq=fit.tau_sq, lag_s=fit.lag_s)
        for s in history.sessions:
            if s.session_index not in fit.session_indices:
                continue
            try:
                v, lam = estimator(fit, s.session_index, threshold, opts.T_R, opts.t_R)
            except MetricError as exc:
                omitted[s.session_index] = str(exc)
                continue
            values.append(v)
            lams.append(lam)
            idx.append(s.session_index)
            days.append(s.day_number)
    else:
        info["d_s"] = opts.d_s
        for s in history.sessions:
            try:
                if kind == "max_power_d":
                    v, lam = max_power_metric(s, opts.d_s)
                else:
                    v, lam = peak_power_metric(s)
            except MetricError as exc:
                omitted[s.session_index] = str(exc)
                continue
            if not (math.isfinite(v) and math.isfinite(lam)):
                omitted[s.session_index] = "non-finite estimate"
                continue
            values.append(v)
            lams.append(lam)
            idx.append(s.session_index)
            days.append(s.day_number)

    if not values:
        raise MetricError(f"rider {history.rider_id!r}: no usable sessions for {kind}")
    lams = np.maximum(np.array(lams), LAMBDA_FLOOR)
    return MetricSeries(kind, values, lams, idx, days, omitted, info)
