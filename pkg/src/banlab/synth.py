"""Synthetic riders with known ground truth.

Two levels are produced:

* metric level: session days, daily loads and per-session performance
  estimates drawn from the training-performance model directly;
* raw level: full 5-second power / heart-rate streams whose heart-rate
  response encodes the rider's preparedness through the session intercept
  ``a_i``, so the whole pipeline (files -> metrics -> fit) can be checked.

The intercept linkage is a modelling convenience: ``a_i`` is chosen so that
power at the reference heart rate ``h_ref`` equals the latent performance
``alpha + beta * W_i (+ noise)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .banister import BanisterParams, preparedness
from .ingest import RiderHistory, SessionRecord
from .metrics import LAMBDA_FLOOR, REFERENCE_TEMPERATURE_C, REFERENCE_TIME_S, MetricSeries
from .tp_model import TpParams
from .training_load import DailyLoadSeries, normalize_loads, session_trimp


class SynthError(ValueError):
    pass


@dataclass
class ScheduleRecipe:
    """Random training schedule.

    Sessions fall on ``n_sessions`` distinct days drawn uniformly, or, when
    ``n_sessions`` is None, on each day with probability
    ``sessions_per_week / 7``.  Session loads are gamma distributed around a
    mean modulated by a training-block cycle and a slower seasonal cycle.
    """

    n_sessions: int | None = None
    sessions_per_week: float = 3.5
    load_mean: float = 1.0
    load_cv: float = 0.35
    block_days: float = 28.0
    block_amplitude: float = 0.5
    season_days: float = 150.0
    season_amplitude: float = 0.5


@dataclass
class RawConfig:
    b: float = 0.3  # bpm per W
    b_sd: float = 0.0  # per-session spread of b
    c: float = 1e-5  # bpm per (degC s)
    hr_noise_sd: float = 3.0
    h_ref: float = 150.0
    lag_s: int = 15
    interval_s: int = 5
    duration_min: float = 60.0
    min_duration_min: float = 15.0
    max_duration_min: float = 240.0
    power_low: float = 100.0
    power_high: float = 350.0
    power_jitter_sd: float = 15.0
    block_min_s: float = 60.0
    block_max_s: float = 600.0
    temperature_range: tuple[float, float] = (5.0, 25.0)
    dropout_prob: float = 0.0  # per-session probability of one recording gap
    power_tracks_fitness: bool = True  # scale power levels by latent / alpha


@dataclass
class SynthConfig:
    truth: TpParams
    n_days: int = 300
    schedule: ScheduleRecipe | np.ndarray | list = field(default_factory=ScheduleRecipe)
    lambda_policy: float | tuple[float, float] = 25.0
    raw: RawConfig | None = None
    exact: bool = False  # no latent or measurement noise
    rng_seed: int = 0
    rider_id: str = "synth"
    kind: str = "power_at_hr"

    def __post_init__(self):
        if self.n_days < 1:
            raise SynthError("n_days must be positive")
        if self.n_days < 30:
            warnings.warn(f"n_days={self.n_days}: fits on fewer than 30 days are unreliable", stacklevel=3)
        if self.raw is not None and self.raw.b - 3 * self.raw.b_sd <= 0:
            raise SynthError("heart-rate slope b must stay positive")


@dataclass
class MetricLevelData:
    metrics: MetricSeries
    loads: DailyLoadSeries
    truth: TpParams
    W: np.ndarray  # preparedness on session days
    latent: np.ndarray


@dataclass
class RawLevelData:
    history: RiderHistory
    truth: TpParams  # beta expressed per normalised TRIMP unit
    W: np.ndarray  # normalised-unit preparedness on session days
    latent: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: float


def _session_days(recipe: ScheduleRecipe, n_days: int, rng) -> np.ndarray:
    days = np.arange(1, n_days + 1)
    if recipe.n_sessions is not None:
        if recipe.n_sessions > n_days:
            raise SynthError("more sessions than days")
        return np.sort(rng.choice(days, size=recipe.n_sessions, replace=False))
    keep = rng.random(n_days) < recipe.sessions_per_week / 7.0
    if not keep.any():
        keep[0] = True
    return days[keep]


def _schedule(config: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """(session days, per-day loads) from either an explicit series or a recipe."""
    if not isinstance(config.schedule, ScheduleRecipe):
        loads = np.asarray(config.schedule, dtype=float)
        if len(loads) < config.n_days:
            loads = np.concatenate([loads, np.zeros(config.n_days - len(loads))])
        days = np.flatnonzero(loads > 0) + 1
        return days, loads
    r = config.schedule
    days = _session_days(r, config.n_days, rng)
    mean = r.load_mean * (
        1
        + r.block_amplitude * np.sin(2 * np.pi * days / r.block_days)
    ) * (1 + r.season_amplitude * np.sin(2 * np.pi * days / r.season_days))
    mean = np.maximum(mean, 0.05 * r.load_mean)
    shape = 1.0 / r.load_cv**2
    w = rng.gamma(shape, mean / shape)
    loads = np.zeros(config.n_days)
    loads[days - 1] = w
    return days, loads


def _lambdas(policy, n, rng) -> np.ndarray:
    if isinstance(policy, (tuple, list)):
        lo, hi = policy
        return rng.uniform(lo, hi, size=n)
    return np.full(n, float(policy))


def generate_metric_level(config: SynthConfig) -> MetricLevelData:
    rng = np.random.default_rng(config.rng_seed)
    days, raw_loads = _schedule(config, rng)
    loads = DailyLoadSeries(raw_loads)
    t = config.truth
    W = preparedness(loads, t.banister, config.n_days)[days - 1]
    lam = _lambdas(config.lambda_policy, len(days), rng)
    mean = t.alpha + t.beta * W
    if config.exact:
        latent = mean.copy()
        observed = mean.copy()
    else:
        latent = mean + t.sigma * rng.standard_normal(len(days))
        observed = latent + np.sqrt(lam) * rng.standard_normal(len(days))
    metrics = MetricSeries(
        config.kind,
        observed,
        np.maximum(lam, LAMBDA_FLOOR),
        np.arange(1, len(days) + 1),
        days,
        info={"synthetic": True},
    )
    return MetricLevelData(metrics, loads, t, W, latent)


def _power_trace(n: int, raw: RawConfig, rng, scale: float = 1.0) -> np.ndarray:
    out = np.empty(n)
    k = 0
    while k < n:
        length = int(rng.uniform(raw.block_min_s, raw.block_max_s) // raw.interval_s) + 1
        level = scale * rng.uniform(raw.power_low, raw.power_high)
        out[k : k + length] = level
        k += length
    out += raw.power_jitter_sd * rng.standard_normal(n)
    return np.round(np.clip(out, 0.0, None))


def _raw_session(index, day, b, a, raw: RawConfig, duration_min, rng, scale=1.0) -> SessionRecord:
    n = max(int(round(duration_min * 60 / raw.interval_s)), 1)
    shift = raw.lag_s // raw.interval_s
    power = _power_trace(n + shift, raw, rng, scale)
    temperature = round(float(rng.uniform(*raw.temperature_range)), 1)
    t_full = np.arange(n + shift) * raw.interval_s
    lagged = power[:n]
    power = power[shift:]
    t = t_full[:n]
    hr = a + b * lagged + raw.c * temperature * t + raw.hr_noise_sd * rng.standard_normal(n)
    if raw.dropout_prob > 0 and rng.random() < raw.dropout_prob and n > 40:
        start = int(rng.integers(10, n - 20))
        stop = start + int(rng.integers(2, 12))
        keep = np.ones(n, dtype=bool)
        keep[start:stop] = False
        t, power, hr = t[keep], power[keep], hr[keep]
    if np.any(hr <= 20) or np.any(hr >= 250):
        raise SynthError(f"session {index}: heart rate left (20, 250); adjust b, a or power range")
    return SessionRecord(index, int(day), temperature, t, power, hr, raw.interval_s)


def generate_raw_level(config: SynthConfig) -> RawLevelData:
    """Sample-level rider history whose power-at-h_ref tracks the truth."""
    raw = config.raw or RawConfig()
    if raw.lag_s % raw.interval_s:
        raise SynthError("lag must be a multiple of the sampling interval")
    ss = np.random.SeedSequence(config.rng_seed)
    sched_seed, *_ = ss.spawn(1)
    rng = np.random.default_rng(sched_seed)
    days, sched_loads = _schedule(config, rng)
    n = len(days)
    session_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence([config.rng_seed, 1]).spawn(n)]

    t = config.truth
    mean_load = float(sched_loads[days - 1].mean())
    # beta per raw TRIMP unit, using a rough TRIMP scale; made exact after generation
    rough_const = raw.duration_min * raw.h_ref
    beta_raw = t.beta / rough_const
    ref = REFERENCE_TEMPERATURE_C * REFERENCE_TIME_S

    trimp = np.zeros(config.n_days)
    sessions, latent, a_all, b_all, W_raw = [], [], [], [], []
    for k, (day, srng) in enumerate(zip(days, session_rngs)):
        w_day = preparedness(trimp, t.banister, config.n_days)[day - 1]
        p_lat = t.alpha + beta_raw * w_day
        if not config.exact:
            p_lat += t.sigma * srng.standard_normal()
        b = raw.b + raw.b_sd * srng.standard_normal() if raw.b_sd > 0 else raw.b
        if b <= 0:
            raise SynthError(f"session {k + 1}: non-positive heart-rate slope {b}")
        a = raw.h_ref - b * p_lat - raw.c * ref
        duration = raw.duration_min * sched_loads[day - 1] / mean_load
        duration = float(np.clip(duration, raw.min_duration_min, raw.max_duration_min))
        noisy_raw = raw if not config.exact else RawConfig(**{**asdict(raw), "hr_noise_sd": 0.0})
        scale = max(p_lat / t.alpha, 0.2) if raw.power_tracks_fitness and t.alpha > 0 else 1.0
        s = _raw_session(k + 1, day, b, a, noisy_raw, duration, srng, scale)
        sessions.append(s)
        trimp[day - 1] += session_trimp(s)
        latent.append(p_lat)
        a_all.append(a)
        b_all.append(b)
        W_raw.append(w_day)

    const = normalize_loads(trimp).normalization_constant
    truth = TpParams(t.alpha, beta_raw * const, t.sigma, t.banister)
    history = RiderHistory(config.rider_id, tuple(sessions), config.n_days)
    return RawLevelData(
        history,
        truth,
        np.array(W_raw) / const,
        np.array(latent),
        np.array(a_all),
        np.array(b_all),
        raw.c,
    )


# --------------------------------------------------------------------------
# JSON config


def config_to_dict(config: SynthConfig) -> dict:
    t = config.truth
    sched = config.schedule
    return {
        "truth": {
            "alpha": t.alpha,
            "beta": t.beta,
            "sigma": t.sigma,
            "k_f": t.banister.k_f,
            "tau_a": t.banister.tau_a,
            "tau_f": t.banister.tau_f,
        },
        "n_days": config.n_days,
        "schedule": asdict(sched) if isinstance(sched, ScheduleRecipe) else {"loads": list(map(float, sched))},
        "lambda_policy": list(config.lambda_policy)
        if isinstance(config.lambda_policy, (tuple, list))
        else config.lambda_policy,
        "raw": None if config.raw is None else asdict(config.raw),
        "exact": config.exact,
        "rng_seed": config.rng_seed,
        "rider_id": config.rider_id,
        "kind": config.kind,
    }


def config_from_dict(d: dict) -> SynthConfig:
    tr = d["truth"]
    truth = TpParams(
        tr["alpha"], tr["beta"], tr["sigma"], BanisterParams(tr["k_f"], tr["tau_a"], tr["tau_f"])
    )
    sched = d.get("schedule") or {}
    schedule = np.asarray(sched["loads"], dtype=float) if "loads" in sched else ScheduleRecipe(**sched)
    lam = d.get("lambda_policy", 25.0)
    raw = d.get("raw")
    if raw is not None:
        raw = dict(raw)
        if "temperature_range" in raw:
            raw["temperature_range"] = tuple(raw["temperature_range"])
        raw = RawConfig(**raw)
    return SynthConfig(
        truth=truth,
        n_days=int(d.get("n_days", 300)),
        schedule=schedule,
        lambda_policy=tuple(lam) if isinstance(lam, list) else float(lam),
        raw=raw,
        exact=bool(d.get("exact", False)),
        rng_seed=int(d.get("rng_seed", 0)),
        rider_id=str(d.get("rider_id", "synth")),
        kind=str(d.get("kind", "power_at_hr")),
    )


def load_config(path) -> SynthConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "ScheduleRecipe",
    "RawConfig",
    "SynthConfig",
    "MetricLevelData",
    "RawLevelData",
    "generate_metric_level",
    "generate_raw_level",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "SynthError",
]
