"""Session files: parsing, validation and rider-history assembly.

A session is a CSV file with header ``t_s,power_w,hr_bpm`` plus a sidecar
``<stem>.meta.json`` holding ``day_number``, ``temperature_c`` and optionally
``sampling_interval_s`` (default 5) and ``session_index``.  Session files for a
rider live in one directory and are named ``<rider_id>_<session_index>.csv``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

HEADER = ("t_s", "power_w", "hr_bpm")
DEFAULT_INTERVAL_S = 5
HR_BOUNDS = (20.0, 250.0)


class IngestError(ValueError):
    """Raised for malformed or invalid session data."""


@dataclass(frozen=True, eq=False)
class SessionRecord:
    """One recorded ride.

    ``hr`` holds NaN where the heart-rate field was empty.
    """

    session_index: int
    day_number: int
    temperature: float
    t: np.ndarray
    power: np.ndarray
    hr: np.ndarray
    sampling_interval: int = DEFAULT_INTERVAL_S
    source: str | None = None

    def __post_init__(self):
        for name in ("t", "power", "hr"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _validate_samples(self.t, self.power, self.hr, self.sampling_interval)
        if self.day_number < 1:
            raise IngestError(f"day_number must be >= 1, got {self.day_number}")

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def duration_min(self) -> float:
        """Session duration in minutes (sample count times interval)."""
        return self.n_samples * self.sampling_interval / 60.0

    @property
    def has_hr(self) -> bool:
        return bool(np.any(~np.isnan(self.hr)))

    @property
    def hr_absent(self) -> np.ndarray:
        """Boolean mask of samples without heart rate."""
        return np.isnan(self.hr)

    @cached_property
    def segments(self) -> list[slice]:
        """Contiguous runs of samples; a gap longer than one interval starts a new run."""
        if self.n_samples == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.t) > self.sampling_interval) + 1
        edges = [0, *breaks.tolist(), self.n_samples]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True, eq=False)
class RiderHistory:
    rider_id: str
    sessions: tuple[SessionRecord, ...]
    training_period: int = 0
    _summary: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        sessions = tuple(sorted(self.sessions, key=lambda s: (s.day_number, s.session_index)))
        if not sessions:
            raise IngestError(f"rider {self.rider_id!r}: history has no sessions")
        seen: set[int] = set()
        for s in sessions:
            if s.session_index in seen:
                raise IngestError(
                    f"rider {self.rider_id!r}: duplicate session_index {s.session_index}"
                )
            seen.add(s.session_index)
        object.__setattr__(self, "sessions", sessions)
        last_day = max(s.day_number for s in sessions)
        period = max(self.training_period, last_day)
        object.__setattr__(self, "training_period", period)

    @property
    def n(self) -> int:
        return len(self.sessions)

    def session(self, index: int) -> SessionRecord:
        for s in self.sessions:
            if s.session_index == index:
                return s
        raise KeyError(index)

    @cached_property
    def pooled_hr(self) -> np.ndarray:
        hr = np.concatenate([s.hr for s in self.sessions])
        return hr[~np.isnan(hr)]

    @cached_property
    def pooled_power(self) -> np.ndarray:
        return np.concatenate([s.power for s in self.sessions])

    @cached_property
    def mean_power(self) -> float:
        return float(self.pooled_power.mean())

    def summary(self) -> dict:
        """Cached rider-level statistics (mean power, HR quartiles)."""
        if not self._summary:
            self._summary["mean_power_w"] = self.mean_power
            self._summary["power_p75_w"] = float(np.percentile(self.pooled_power, 75))
            if self.pooled_hr.size:
                for q in (25, 50, 75):
                    self._summary[f"hr_p{q}_bpm"] = hr_percentile(self, q)
        return dict(self._summary)


def _validate_samples(t, power, hr, interval):
    if not (len(t) == len(power) == len(hr)):
        raise IngestError("sample columns have different lengths")
    if len(t) == 0:
        raise IngestError("session has no samples")
    if interval <= 0:
        raise IngestError(f"sampling interval must be positive, got {interval}")
    if t[0] < 0:
        raise IngestError("negative timestamp")
    dt = np.diff(t)
    if np.any(dt <= 0):
        bad = int(np.flatnonzero(dt <= 0)[0]) + 1
        raise IngestError(f"non-monotone timestamps at sample {bad}")
    if np.any(np.mod(t, interval) != 0):
        raise IngestError(f"timestamps are not multiples of the {interval} s sampling interval")
    if np.any(~np.isfinite(power)) or np.any(power < 0):
        raise IngestError("power must be finite and non-negative")
    present = hr[~np.isnan(hr)]
    if np.any((present <= HR_BOUNDS[0]) | (present >= HR_BOUNDS[1])):
        raise IngestError(f"heart rate outside {HR_BOUNDS}")


def _format_number(x: float) -> str:
    if math.isnan(x):
        return ""
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def read_samples(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read the raw sample table of a session file, reporting bad lines by number."""
    path = Path(path)
    t, power, hr = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != HEADER:
            raise IngestError(f"{path}: expected header {','.join(HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise IngestError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            try:
                t.append(float(row[0]))
                power.append(float(row[1]))
                hr.append(float(row[2]) if row[2].strip() else math.nan)
            except ValueError as exc:
                raise IngestError(f"{path}:{line}: malformed row {row!r}") from exc
    if not t:
        raise IngestError(f"{path}: no samples")
    return np.array(t), np.array(power), np.array(hr)


def write_samples(path: str | Path, t, power, hr) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for row in zip(t, power, hr):
            writer.writerow([_format_number(v) for v in row])


def parse_session(
    path: str | Path,
    day_number: int,
    temperature: float,
    session_index: int = 1,
    sampling_interval: int = DEFAULT_INTERVAL_S,
) -> SessionRecord:
    t, power, hr = read_samples(path)
    try:
        return SessionRecord(
            session_index=session_index,
            day_number=int(day_number),
            temperature=float(temperature),
            t=t,
            power=power,
            hr=hr,
            sampling_interval=int(sampling_interval),
            source=str(path),
        )
    except IngestError as exc:
        raise IngestError(f"{path}: {exc}") from None


def meta_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def write_session(record: SessionRecord, path: str | Path) -> Path:
    """Write a session CSV and its sidecar; returns the CSV path."""
    path = Path(path)
    write_samples(path, record.t, record.power, record.hr)
    meta = {
        "session_index": record.session_index,
        "day_number": record.day_number,
        "temperature_c": record.temperature,
        "sampling_interval_s": record.sampling_interval,
    }
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def session_filename(rider_id: str, session_index: int) -> str:
    return f"{rider_id}_{session_index:04d}.csv"


def _index_from_name(stem: str, rider_id: str) -> int | None:
    m = re.fullmatch(re.escape(rider_id) + r"_(\d+)", stem)
    return int(m.group(1)) if m else None


def rider_files(directory: str | Path, rider_id: str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    out = []
    for p in directory.glob(f"{rider_id}_*.csv"):
        if _index_from_name(p.stem, rider_id) is not None:
            out.append(p)
    return sorted(out)


def load_history(directory: str | Path, rider_id: str, training_period: int | None = None) -> RiderHistory:
    """Load every session file of ``rider_id`` found in ``directory``."""
    files = rider_files(directory, rider_id)
    if not files:
        raise IngestError(f"no history found for rider {rider_id!r} in {directory}")
    sessions = []
    for f in files:
        mp = meta_path(f)
        if not mp.exists():
            raise IngestError(f"{f}: missing metadata sidecar {mp.name}")
        meta = json.loads(mp.read_text(encoding="utf-8"))
        for key in ("day_number", "temperature_c"):
            if key not in meta:
                raise IngestError(f"{mp}: missing key {key!r}")
        index = meta.get("session_index", _index_from_name(f.stem, rider_id))
        sessions.append(
            parse_session(
                f,
                day_number=meta["day_number"],
                temperature=meta["temperature_c"],
                session_index=int(index),
                sampling_interval=meta.get("sampling_interval_s", DEFAULT_INTERVAL_S),
            )
        )
    return RiderHistory(rider_id, tuple(sessions), training_period or 0)


def write_history(history: RiderHistory, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        write_session(s, directory / session_filename(history.rider_id, s.session_index))
        for s in history.sessions
    ]


def hr_percentile(history: RiderHistory, q: float) -> float:
    """Percentile of pooled heart rate, linear interpolation between closest ranks."""
    if not 0 < q < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {q}")
    hr = history.pooled_hr
    if hr.size == 0:
        raise IngestError(f"rider {history.rider_id!r}: no heart-rate samples")
    return float(np.percentile(hr, q, method="linear"))


def power_percentile(history: RiderHistory, q: float) -> float:
    if not 0 < q < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {q}")
    return float(np.percentile(history.pooled_power, q, method="linear"))
