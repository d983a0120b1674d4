"""TRIMP per session and the daily training-load series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import RiderHistory, SessionRecord


class TrainingLoadError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DailyLoadSeries:
    """Loads ``w_j`` for days ``j = 1..len(loads)``; ``loads[j - 1]`` is day ``j``."""

    loads: np.ndarray
    normalization_constant: float = 1.0

    def __post_init__(self):
        w = np.array(self.loads, dtype=float)
        if w.ndim != 1:
            raise TrainingLoadError("loads must be one-dimensional")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise TrainingLoadError("loads must be finite and non-negative")
        if not self.normalization_constant > 0:
            raise TrainingLoadError("normalization_constant must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "loads", w)

    @property
    def n_days(self) -> int:
        return len(self.loads)

    def day(self, j: int) -> float:
        return float(self.loads[j - 1])

    def raw(self) -> np.ndarray:
        return self.loads * self.normalization_constant

    def normalized(self) -> "DailyLoadSeries":
        return normalize_loads(self.raw())

    def scaled(self, factor: float) -> "DailyLoadSeries":
        return DailyLoadSeries(self.loads * factor, self.normalization_constant / factor)


def session_trimp(session: SessionRecord) -> float:
    """Duration in minutes times mean heart rate of the samples that carry one."""
    if not session.has_hr:
        raise TrainingLoadError(
            f"session {session.session_index}: no heart-rate data"
        )
    return session.duration_min * float(np.nanmean(session.hr))


def normalize_loads(raw) -> DailyLoadSeries:
    raw = np.asarray(raw, dtype=float)
    nonzero = raw[raw > 0]
    if nonzero.size == 0:
        raise TrainingLoadError("cannot normalize an all-zero load series")
    const = float(nonzero.mean())
    return DailyLoadSeries(raw / const, const)


def build_daily_loads(history: RiderHistory, normalize: bool = True) -> DailyLoadSeries:
    failures = [s.session_index for s in history.sessions if not s.has_hr]
    if failures:
        raise TrainingLoadError(f"no heart-rate data in sessions {failures}")
    raw = np.zeros(history.training_period)
    for s in history.sessions:
        raw[s.day_number - 1] += session_trimp(s)
    return normalize_loads(raw) if normalize else DailyLoadSeries(raw)
