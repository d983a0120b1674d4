"""Maximum-likelihood fit of the training-performance model.

Observed session performance is modelled as

    P_hat_i ~ N(alpha + beta * W_{s_i}, sigma^2 + lambda_i)

with ``W`` the fitness-fatigue preparedness on the session day and
``lambda_i`` the (fixed) measurement variance of the session metric.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .banister import BanisterParams, preparedness
from .metrics import MetricSeries
from .training_load import DailyLoadSeries

PARAM_NAMES = ("alpha", "beta", "sigma", "k_f", "tau_a", "tau_f")
LOG2PI = math.log(2 * math.pi)

GRID_KF = (1.25, 1.5, 2.0, 3.0, 4.0)
GRID_TAU_A = (15.0, 30.0, 60.0, 90.0, 150.0)
GRID_TAU_F = (1.0, 3.0, 7.0, 15.0, 30.0)

# search box for (k_f, tau_a, tau_f); the likelihood is -inf outside
KF_BOUNDS = (1e-3, 1e3)
TAU_BOUNDS = (0.05, 1e4)


class FitError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class TpParams:
    alpha: float
    beta: float
    sigma: float
    banister: BanisterParams

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")

    def as_array(self) -> np.ndarray:
        b = self.banister
        return np.array([self.alpha, self.beta, self.sigma, b.k_f, b.tau_a, b.tau_f])

    @classmethod
    def from_array(cls, x) -> "TpParams":
        x = [float(v) for v in x]
        return cls(x[0], x[1], x[2], BanisterParams(x[3], x[4], x[5]))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.as_array().tolist()))


class _Problem:
    """Session data bound to a load series; evaluates likelihood pieces."""

    def __init__(self, metrics: MetricSeries, loads: DailyLoadSeries):
        self.y = metrics.values
        self.lam = metrics.variances
        self.rows = metrics.days - 1
        self.loads = np.asarray(loads.loads, dtype=float)
        self.horizon = max(len(self.loads), int(metrics.days.max()))
        if np.any(self.lam <= 0):
            raise ValueError("measurement variances must be positive")

    def W(self, banister: BanisterParams) -> np.ndarray:
        return preparedness(self.loads, banister, self.horizon)[self.rows]

    def loglik(self, alpha, beta, sigma, banister) -> float:
        var = sigma * sigma + self.lam
        if np.any(var <= 0):
            raise ValueError("sigma^2 + lambda must be positive")
        r = self.y - alpha - beta * self.W(banister)
        return float(-0.5 * (len(self.y) * LOG2PI + np.sum(np.log(var)) + np.sum(r * r / var)))

    def profile(self, sigma, banister) -> tuple[float, float, float]:
        """Weighted-least-squares (alpha, beta) and the log-likelihood there."""
        var = sigma * sigma + self.lam
        wt = 1.0 / var
        W = self.W(banister)
        sw = wt.sum()
        wm = (wt @ W) / sw
        ym = (wt @ self.y) / sw
        Wc = W - wm
        sxx = float(wt @ (Wc * Wc))
        beta = float(wt @ (Wc * (self.y - ym))) / sxx if sxx > 0 else 0.0
        alpha = float(ym - beta * wm)
        r = self.y - alpha - beta * W
        ll = -0.5 * (len(self.y) * LOG2PI + np.sum(np.log(var)) + np.sum(r * r * wt))
        return alpha, beta, float(ll)


def log_likelihood(metrics: MetricSeries, loads: DailyLoadSeries, params: TpParams) -> float:
    """Log-likelihood summed over recorded sessions only."""
    prob = _Problem(metrics, loads)
    return prob.loglik(params.alpha, params.beta, params.sigma, params.banister)


# --------------------------------------------------------------------------
# starting values


@dataclass(frozen=True)
class GridSeed:
    params: BanisterParams
    sign: int  # +1 when performance rises with preparedness
    correlation: float
    grid_point: tuple[float, float, float]


def _corr(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / den if den > 0 else 0.0


def seed_by_grid(
    metrics: MetricSeries,
    loads: DailyLoadSeries,
    grid=(GRID_KF, GRID_TAU_A, GRID_TAU_F),
) -> GridSeed:
    """Correlation-maximising Banister parameters over a coarse grid.

    The best grid point (largest absolute correlation, lowest grid point on
    ties) is refined by a three-point parabola along each axis in log space.
    """
    if metrics.n < 8:
        raise ValueError(f"need at least 8 sessions to seed the fit, got {metrics.n}")
    y = metrics.values
    if np.ptp(y) == 0:
        raise ValueError("metric series has zero variance")
    prob = _Problem(metrics, loads)
    axes = [np.asarray(sorted(g), dtype=float) for g in grid]
    shape = tuple(len(a) for a in axes)
    score = np.zeros(shape)
    corr = np.zeros(shape)
    for ijk in itertools.product(*(range(n) for n in shape)):
        b = BanisterParams(*(axes[d][ijk[d]] for d in range(3)))
        r = _corr(prob.W(b), y)
        corr[ijk] = r
        score[ijk] = abs(r)
    # np.argmax returns the first maximum in C order, i.e. the lexicographically smallest
    best = np.unravel_index(int(np.argmax(score)), shape)

    logs = []
    for d in range(3):
        i = best[d]
        la = np.log(axes[d])
        if 0 < i < shape[d] - 1:
            lo = list(best)
            hi = list(best)
            lo[d] -= 1
            hi[d] += 1
            fm, f0, fp = score[tuple(lo)], score[best], score[tuple(hi)]
            den = fm - 2 * f0 + fp
            off = 0.5 * (fm - fp) / den if den < 0 else 0.0
            off = float(np.clip(off, -1.0, 1.0))
            j = i + 1 if off > 0 else i - 1
            logs.append(la[i] + abs(off) * (la[j] - la[i]))
        else:
            logs.append(la[i])
    params = BanisterParams(*np.exp(logs).tolist())
    r_best = float(corr[best])
    return GridSeed(
        params=params,
        sign=1 if r_best >= 0 else -1,
        correlation=r_best,
        grid_point=tuple(float(axes[d][best[d]]) for d in range(3)),
    )


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    seed: int = 0
    n_starts: int = 9
    jitter: float = 0.3
    sigma_floor: float = 1e-6
    fatol: float = 1e-8
    xatol: float = 1e-7
    simplex_step: float = 0.25
    max_restarts: int = 20
    max_iter: int = 4000
    agree_tol: float = 1e-4
    hessian_step: float = 1e-4
    workers: int = 1


@dataclass
class StartResult:
    index: int
    start: list[float]
    x: list[float]
    log_likelihood: float
    success: bool
    n_eval: int
    message: str = ""


@dataclass
class FitResult:
    params: TpParams
    standard_errors: dict[str, float] | None
    log_likelihood: float
    converged: bool
    n_starts: int
    best_start: int
    delta_w_progress: float
    kind: str = ""
    normalization_constant: float = 1.0
    covariance: np.ndarray | None = None
    covariance_log: np.ndarray | None = None
    seed: GridSeed | None = None
    starts: list[StartResult] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def se_available(self) -> bool:
        return self.standard_errors is not None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "params": self.params.as_dict(),
            "standard_errors": self.standard_errors,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "n_starts": self.n_starts,
            "best_start": self.best_start,
            "delta_w_progress": self.delta_w_progress,
            "normalization_constant": self.normalization_constant,
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "flags": list(self.flags),
            "starts": [
                {
                    "index": s.index,
                    "start": s.start,
                    "x": s.x,
                    "log_likelihood": s.log_likelihood,
                    "success": s.success,
                    "n_eval": s.n_eval,
                }
                for s in self.starts
            ],
        }
        if self.seed is not None:
            d["grid_seed"] = {
                "params": [self.seed.params.k_f, self.seed.params.tau_a, self.seed.params.tau_f],
                "sign": self.seed.sign,
                "correlation": self.seed.correlation,
                "grid_point": list(self.seed.grid_point),
            }
        return d


def _in_box(kf, ta, tf) -> bool:
    return (
        KF_BOUNDS[0] <= kf <= KF_BOUNDS[1]
        and TAU_BOUNDS[0] <= ta <= TAU_BOUNDS[1]
        and TAU_BOUNDS[0] <= tf <= TAU_BOUNDS[1]
    )


def _unpack(x, sigma_floor):
    """Search vector -> (sigma, BanisterParams) or None outside the box."""
    ls, lk, la, lf = x
    if max(abs(lk), abs(la), abs(lf)) > 50 or ls > 50:
        return None
    kf, ta, tf = math.exp(lk), math.exp(la), math.exp(lf)
    if not _in_box(kf, ta, tf):
        return None
    sigma = sigma_floor + math.exp(ls) if ls > -700 else sigma_floor
    return sigma, BanisterParams(kf, ta, tf)


def _run_start(prob: _Problem, index: int, x0: np.ndarray, opts: FitOptions) -> StartResult:
    def nll(x):
        u = _unpack(x, opts.sigma_floor)
        if u is None:
            return math.inf
        ll = prob.profile(*u)[2]
        return -ll if math.isfinite(ll) else math.inf

    x = np.asarray(x0, dtype=float)
    best = nll(x)
    n_eval = 0
    success = False
    message = ""
    if not math.isfinite(best):
        return StartResult(index, x0.tolist(), x.tolist(), -math.inf, False, 0, "start outside search box")
    for _ in range(opts.max_restarts):
        simplex = np.vstack([x, x + opts.simplex_step * np.eye(len(x))])
        res = minimize(
            nll,
            x,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "xatol": opts.xatol,
                "fatol": opts.fatol,
                "maxiter": opts.max_iter,
                "maxfev": 2 * opts.max_iter,
            },
        )
        n_eval += res.nfev
        message = res.message
        improvement = best - res.fun
        if res.fun <= best:
            x, best = res.x, float(res.fun)
        success = bool(res.success)
        if success and improvement < opts.fatol:
            break
    ll = -best
    return StartResult(index, x0.tolist(), x.tolist(), ll, success and math.isfinite(ll), n_eval, message)


def _initial_sigma(prob: _Problem, banister: BanisterParams) -> float:
    W = prob.W(banister)
    X = np.column_stack([np.ones_like(W), W])
    coef, *_ = np.linalg.lstsq(X, prob.y, rcond=None)
    r = prob.y - X @ coef
    v = float(r @ r) / max(len(r) - 2, 1)
    excess = v - float(prob.lam.mean())
    return math.sqrt(max(excess, 0.1 * v, 1e-300))


def starting_points(prob: _Problem, seed: GridSeed, opts: FitOptions) -> list[np.ndarray]:
    b = seed.params
    base = np.log([_initial_sigma(prob, b), b.k_f, b.tau_a, b.tau_f])
    rng = np.random.default_rng(opts.seed)
    starts = [base]
    for _ in range(opts.n_starts - 1):
        factors = 1.0 + rng.uniform(-opts.jitter, opts.jitter, size=4)
        starts.append(base + np.log(factors))
    return starts


def _theta(params: TpParams) -> np.ndarray:
    """Natural parameters -> Hessian coordinates (logs of the positive ones)."""
    x = params.as_array()
    return np.concatenate([x[:2], np.log(x[2:])])


def _from_theta(theta) -> TpParams:
    return TpParams.from_array(np.concatenate([theta[:2], np.exp(theta[2:])]))


def _loglik_theta(prob: _Problem, theta) -> float:
    kf, ta, tf = np.exp(theta[3:])
    if not _in_box(kf, ta, tf):
        return -math.inf
    return prob.loglik(theta[0], theta[1], math.exp(theta[2]), BanisterParams(kf, ta, tf))


def numerical_hessian(f, x, steps) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``x`` with per-coordinate steps."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    E = np.diag(steps)
    for i in range(n):
        H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / steps[i] ** 2
        for j in range(i):
            v = (
                f(x + E[i] + E[j])
                - f(x + E[i] - E[j])
                - f(x - E[i] + E[j])
                + f(x - E[i] - E[j])
            ) / (4 * steps[i] * steps[j])
            H[i, j] = H[j, i] = v
    return H


def _hessian_steps(prob: _Problem, theta, rel) -> np.ndarray:
    y_sd = float(np.std(prob.y)) or 1.0
    W = prob.W(BanisterParams(*np.exp(theta[3:])))
    w_sd = float(np.std(W)) or 1.0
    typical = np.array([y_sd, y_sd / w_sd, 1.0, 1.0, 1.0, 1.0])
    return rel * np.maximum(np.abs(theta), typical)


def _covariances(prob: _Problem, params: TpParams, opts: FitOptions):
    theta = _theta(params)
    steps = _hessian_steps(prob, theta, opts.hessian_step)
    H = numerical_hessian(lambda t: _loglik_theta(prob, t), theta, steps)
    info = -H
    if not np.all(np.isfinite(info)):
        return None, None
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return None, None
    cov_log = np.linalg.inv(info)
    cov_log = 0.5 * (cov_log + cov_log.T)
    jac = np.concatenate([[1.0, 1.0], np.exp(theta[2:])])
    cov = cov_log * np.outer(jac, jac)
    return cov, cov_log


def delta_w_progress(beta: float, W_sessions: np.ndarray) -> float:
    return float(beta * (W_sessions.max() - W_sessions.min()))


def fit(
    metrics: MetricSeries,
    loads: DailyLoadSeries,
    options: FitOptions | None = None,
    seed: GridSeed | None = None,
    starts: list | None = None,
) -> FitResult:
    """Multi-start maximum-likelihood fit of all six parameters."""
    opts = options or FitOptions()
    prob = _Problem(metrics, loads)
    flags = []
    if metrics.n < 10:
        flags.append(f"only {metrics.n} sessions; estimates are fragile")
    if starts is None:
        seed = seed or seed_by_grid(metrics, loads)
        starts = starting_points(prob, seed, opts)
    starts = [np.asarray(s, dtype=float) for s in starts]

    jobs = list(enumerate(starts))
    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(lambda j: _run_start(prob, j[0], j[1], opts), jobs))
    else:
        results = [_run_start(prob, i, x0, opts) for i, x0 in jobs]

    good = [r for r in results if r.success]
    if not good:
        raise FitError("no start converged", diagnostics=results)
    ranked = sorted(good, key=lambda r: (-r.log_likelihood, r.index))
    best = ranked[0]
    if len(ranked) >= 2:
        converged = ranked[0].log_likelihood - ranked[1].log_likelihood <= opts.agree_tol
    else:
        converged = len(results) == 1

    sigma, banister = _unpack(best.x, opts.sigma_floor)
    alpha, beta, ll = prob.profile(sigma, banister)
    params = TpParams(alpha, beta, sigma, banister)
    if sigma < 10 * opts.sigma_floor:
        flags.append("sigma at lower search bound")
    if banister.k_f <= 1:
        flags.append("k_f <= 1: no net immediate training detriment")
    if banister.tau_a <= banister.tau_f:
        flags.append("tau_a <= tau_f: fatigue outlasts fitness")

    cov, cov_log = _covariances(prob, params, opts)
    ses = None
    if cov is None:
        flags.append("observed information not positive definite; standard errors unavailable")
    else:
        ses = dict(zip(PARAM_NAMES, np.sqrt(np.diag(cov)).tolist()))

    return FitResult(
        params=params,
        standard_errors=ses,
        log_likelihood=ll,
        converged=bool(converged),
        n_starts=len(results),
        best_start=best.index,
        delta_w_progress=delta_w_progress(beta, prob.W(banister)),
        kind=metrics.kind,
        normalization_constant=loads.normalization_constant,
        covariance=cov,
        covariance_log=cov_log,
        seed=seed,
        starts=results,
        flags=flags,
    )


def bootstrap_standard_errors(
    metrics: MetricSeries,
    loads: DailyLoadSeries,
    result: FitResult,
    n_boot: int = 200,
    seed: int = 0,
    options: FitOptions | None = None,
    robust: bool = True,
) -> dict[str, float]:
    """Session-resampling bootstrap SEs, each replicate started at ``result``.

    A few resamples can drift onto the k_f = 1, tau_a = tau_f ridge where W
    vanishes and beta is unbounded, so by default the spread is the
    interquartile range scaled to a normal sd.  ``robust=False`` gives the
    plain standard deviation.
    """
    opts = options or FitOptions()
    rng = np.random.default_rng(seed)
    p = result.params
    x0 = np.log([max(p.sigma - opts.sigma_floor, 1e-300), p.banister.k_f, p.banister.tau_a, p.banister.tau_f])
    draws = []
    for _ in range(n_boot):
        rows = np.sort(rng.integers(0, metrics.n, size=metrics.n))
        sub = metrics.subset(rows)
        try:
            r = fit(sub, loads, opts, starts=[x0])
        except FitError:
            continue
        draws.append(r.params.as_array())
    draws = np.array(draws)
    if robust:
        q75, q25 = np.percentile(draws, [75, 25], axis=0)
        spread = (q75 - q25) / (2 * norm.ppf(0.75))
    else:
        spread = draws.std(axis=0, ddof=1)
    return dict(zip(PARAM_NAMES, spread.tolist()))


# --------------------------------------------------------------------------
# reporting


@dataclass
class ProgressionReport:
    kind: str
    delta_w_progress: float
    relative_progression: float
    days: np.ndarray  # 1..horizon
    preparedness: np.ndarray
    session_indices: np.ndarray
    session_days: np.ndarray
    observed: np.ndarray
    fitted: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def progression_report(result: FitResult, metrics: MetricSeries, loads: DailyLoadSeries, z: float = 1.959963984540054) -> ProgressionReport:
    """Preparedness trajectory, fitted values with pointwise bands, and progression."""
    if not result.converged:
        raise FitError("fit did not converge; no progression report")
    prob = _Problem(metrics, loads)
    p = result.params
    W_all = preparedness(prob.loads, p.banister, prob.horizon)
    W = W_all[prob.rows]
    fitted = p.alpha + p.beta * W

    lower = np.full_like(fitted, np.nan)
    upper = np.full_like(fitted, np.nan)
    if result.covariance_log is not None:
        theta = _theta(p)
        idx = [0, 1, 3, 4, 5]
        cov = result.covariance_log[np.ix_(idx, idx)]

        def mean_fn(t):
            b = BanisterParams(*np.exp(t[2:]))
            return t[0] + t[1] * prob.W(b)

        t0 = theta[idx]
        h = 1e-5 * np.maximum(np.abs(t0), 1.0)
        G = np.empty((len(fitted), len(t0)))
        for k in range(len(t0)):
            e = np.zeros(len(t0))
            e[k] = h[k]
            G[:, k] = (mean_fn(t0 + e) - mean_fn(t0 - e)) / (2 * h[k])
        sd = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", G, cov, G), 0.0))
        lower = fitted - z * sd
        upper = fitted + z * sd

    base = p.alpha + p.beta * W.min()
    dwp = delta_w_progress(p.beta, W)
    return ProgressionReport(
        kind=metrics.kind,
        delta_w_progress=dwp,
        relative_progression=dwp / base if base != 0 else math.nan,
        days=np.arange(1, prob.horizon + 1),
        preparedness=W_all,
        session_indices=metrics.session_indices,
        session_days=metrics.days,
        observed=metrics.values,
        fitted=fitted,
        lower=lower,
        upper=upper,
    )
