"""Forward fitness-fatigue model: preparedness trajectories and single-bout timing.

The fitness scale is fixed at 1 and the baseline at 0, so a parameter set is
``(k_f, tau_a, tau_f)``.  A load on day ``j`` first affects preparedness on day
``j + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect
from scipy.signal import lfilter


class BanisterError(ValueError):
    pass


@dataclass(frozen=True)
class BanisterParams:
    k_f: float
    tau_a: float
    tau_f: float

    def __post_init__(self):
        for name in ("k_f", "tau_a", "tau_f"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise BanisterError(f"{name} must be positive and finite, got {v}")

    @property
    def r_a(self) -> float:
        return 1.0 / self.tau_a

    @property
    def r_f(self) -> float:
        return 1.0 / self.tau_f

    @classmethod
    def from_rates(cls, k_f: float, r_a: float, r_f: float) -> "BanisterParams":
        return cls(k_f, 1.0 / r_a, 1.0 / r_f)


def _decayed_sum(w: np.ndarray, rate: float) -> np.ndarray:
    # y_i = e^{-r} (y_{i-1} + w_{i-1}), y_0 = 0
    q = math.exp(-rate)
    return lfilter([0.0, q], [1.0, -q], w)


def preparedness(loads, params: BanisterParams, horizon: int | None = None) -> np.ndarray:
    """Preparedness ``W`` for days ``1..horizon`` (index 0 is day 1).

    ``loads`` is a DailyLoadSeries or a plain array of daily loads; loads are
    zero-extended to ``horizon``.
    """
    w = np.asarray(getattr(loads, "loads", loads), dtype=float)
    horizon = len(w) if horizon is None else int(horizon)
    if horizon < 1:
        raise BanisterError("horizon must be at least one day")
    if horizon > len(w):
        w = np.concatenate([w, np.zeros(horizon - len(w))])
    else:
        w = w[:horizon]
    return _decayed_sum(w, params.r_a) - params.k_f * _decayed_sum(w, params.r_f)


def single_bout_response(w: float, params: BanisterParams, t):
    """Response on day ``t`` to a bout of load ``w`` on day 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise BanisterError("t must be non-negative")
    out = w * (np.exp(-params.r_a * t) - params.k_f * np.exp(-params.r_f * t))
    return float(out) if out.ndim == 0 else out


def two_session_response(params: BanisterParams, t, s):
    """Response at ``t`` to unit bouts at days 0 and ``s`` (``0 <= s <= t``)."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or np.any(s > t):
        raise BanisterError("spacing s must lie in [0, t]")
    out = single_bout_response(1.0, params, t) + single_bout_response(1.0, params, t - s)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Timing:
    """Single-bout landmarks in days.

    ``t0`` is the return to baseline, ``t_star`` the peak and ``t_half`` the day
    after the peak at which the response has fallen to half of it.  ``crosses``
    is False when the response never rises through zero from below.
    """

    t0: float
    t_star: float
    t_half: float
    crosses: bool


def timing_quantities(params: BanisterParams, xtol: float = 1e-8) -> Timing:
    r_a, r_f, k_f = params.r_a, params.r_f, params.k_f
    if r_a == r_f:
        raise BanisterError("degenerate parameters: tau_a equals tau_f")
    crosses = k_f > 1 and r_f > r_a
    t0 = math.log(k_f) / (r_f - r_a) if crosses else math.nan

    # stationary point of the single-bout response; a positive maximum only if r_f > r_a
    t_star = math.nan
    ratio = k_f * r_f / r_a
    if r_f > r_a and ratio > 1:
        t_star = math.log(ratio) / (r_f - r_a)

    t_half = math.nan
    if math.isfinite(t_star):
        peak = single_bout_response(1.0, params, t_star)
        if peak > 0:
            def f(t):
                return single_bout_response(1.0, params, t) - peak / 2
            t_half = bisect(f, t_star, t_star + 20 * params.tau_a, xtol=xtol)
    return Timing(t0, t_star, t_half, crosses)
