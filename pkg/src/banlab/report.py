"""Tables, CSV/JSON artifacts and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .ingest import RiderHistory
from .metrics import (
    KIND_ALIASES,
    MetricError,
    MetricOptions,
    MetricSeries,
    build_metric_series,
    canonical_kind,
    fit_hr_power,
)
from .tp_model import PARAM_NAMES, FitError, FitOptions, FitResult, ProgressionReport, fit, progression_report
from .training_load import DailyLoadSeries, build_daily_loads

SHORT_KIND = {v: k for k, v in KIND_ALIASES.items()}
REPORT_KINDS = ("power_at_hr", "hr_at_power", "max_power_d", "peak_power")


def atomic_write(path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# --------------------------------------------------------------------------
# domain tables


def loads_csv(loads: DailyLoadSeries) -> str:
    return csv_text(["day", "load"], ((j + 1, float(w)) for j, w in enumerate(loads.loads)))


def read_loads_csv(path, normalization_constant: float = 1.0) -> DailyLoadSeries:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    days = np.array([int(r["day"]) for r in rows])
    w = np.zeros(int(days.max()))
    w[days - 1] = [float(r["load"]) for r in rows]
    return DailyLoadSeries(w, normalization_constant)


def metrics_csv(m: MetricSeries) -> str:
    return csv_text(
        ["session", "day", "value", "lambda"],
        zip(m.session_indices.tolist(), m.days.tolist(), m.values.tolist(), m.variances.tolist()),
    )


def preparedness_csv(days, W) -> str:
    return csv_text(["day", "W"], zip(np.asarray(days).tolist(), np.asarray(W, dtype=float).tolist()))


def fitted_csv(rep: ProgressionReport) -> str:
    return csv_text(
        ["session", "day", "W", "observed", "fitted", "lower", "upper"],
        zip(
            rep.session_indices.tolist(),
            rep.session_days.tolist(),
            rep.preparedness[rep.session_days - 1].tolist(),
            rep.observed.tolist(),
            rep.fitted.tolist(),
            rep.lower.tolist(),
            rep.upper.tolist(),
        ),
    )


def read_fitted_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _est(v: float, se: float | None) -> str:
    if se is None or not math.isfinite(se):
        return f"{v:.1f} (NA)"
    return f"{v:.1f} ({se:.1f})"


def table2_row(result: FitResult) -> list[str]:
    """Estimates to one decimal with standard errors in parentheses."""
    p = result.params.as_dict()
    se = result.standard_errors or {}
    return [_est(p[name], se.get(name)) for name in PARAM_NAMES]


def format_table2(rows: list[tuple[str, FitResult | None, str]]) -> str:
    head = ["metric", *PARAM_NAMES, "converged"]
    lines = ["\t".join(head)]
    for label, res, note in rows:
        if res is None:
            lines.append("\t".join([label, *(["-"] * len(PARAM_NAMES)), f"failed: {note}"]))
        else:
            lines.append("\t".join([label, *table2_row(res), str(res.converged).lower()]))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    flags: dict
    inputs: dict[str, str]
    seed: int | None
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "flags": self.flags,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
            "timestamp": self.timestamp,
        }

    def write(self, path) -> Path:
        return atomic_write(path, json_text(self.to_dict()))


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class MetricRun:
    kind: str
    metrics: MetricSeries | None = None
    result: FitResult | None = None
    report: ProgressionReport | None = None
    error: str | None = None


def run_metric(
    history: RiderHistory,
    kind: str,
    loads: DailyLoadSeries,
    metric_options: MetricOptions | None = None,
    fit_options: FitOptions | None = None,
    hr_fit=None,
) -> MetricRun:
    kind = canonical_kind(kind)
    run = MetricRun(kind)
    try:
        run.metrics = build_metric_series(history, kind, metric_options, hr_fit=hr_fit)
        run.result = fit(run.metrics, loads, fit_options)
        if run.result.converged:
            run.report = progression_report(run.result, run.metrics, loads)
        else:
            run.error = "multi-start maxima disagree (not converged)"
    except (MetricError, FitError, ValueError) as exc:
        run.error = str(exc)
    return run


@dataclass
class AllMetricsReport:
    rider_id: str
    runs: list[MetricRun]
    normalization_constant: float

    @property
    def ok(self) -> bool:
        return all(r.error is None for r in self.runs)

    def table2(self) -> str:
        return format_table2([(SHORT_KIND[r.kind], r.result, r.error or "") for r in self.runs])

    def table2_rows(self) -> list[list]:
        rows = []
        for r in self.runs:
            p = r.result.params.as_dict() if r.result else {}
            se = (r.result.standard_errors or {}) if r.result else {}
            row = [SHORT_KIND[r.kind]]
            for name in PARAM_NAMES:
                row += [p.get(name, math.nan), se.get(name, math.nan)]
            row += [bool(r.result and r.result.converged), r.error or ""]
            rows.append(row)
        return rows

    def table3_rows(self) -> list[list]:
        return [
            [
                SHORT_KIND[r.kind],
                r.result.delta_w_progress if r.result else math.nan,
                r.report.relative_progression if r.report else math.nan,
            ]
            for r in self.runs
        ]


TABLE2_HEADER = ["metric"] + [f"{n}{s}" for n in PARAM_NAMES for s in ("", "_se")] + ["converged", "diagnostic"]
TABLE3_HEADER = ["metric", "beta_x_delta_w_max", "relative_progression"]


def report_all_metrics(
    history: RiderHistory,
    seed: int = 0,
    kinds=REPORT_KINDS,
    metric_options: MetricOptions | None = None,
    fit_options: FitOptions | None = None,
) -> AllMetricsReport:
    """Fit every performance metric for one rider, side by side."""
    loads = build_daily_loads(history, normalize=True)
    fopts = fit_options or FitOptions(seed=seed)
    hr_fit = None
    runs = []
    for kind in kinds:
        kind = canonical_kind(kind)
        if kind in ("power_at_hr", "hr_at_power") and hr_fit is None:
            mopts = metric_options or MetricOptions()
            try:
                hr_fit = fit_hr_power(history, mopts.lag_s, mopts.fit_drift)
            except MetricError as exc:
                runs.append(MetricRun(kind, error=str(exc)))
                continue
        runs.append(run_metric(history, kind, loads, metric_options, fopts, hr_fit=hr_fit))
    return AllMetricsReport(history.rider_id, runs, loads.normalization_constant)


def write_metric_artifacts(run: MetricRun, out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    if run.result is not None:
        d = run.result.to_dict()
        if run.report is not None:
            d["relative_progression"] = run.report.relative_progression
        paths.append(atomic_write(out_dir / f"{prefix}fit.json", json_text(d)))
    if run.report is not None:
        paths.append(atomic_write(out_dir / f"{prefix}preparedness.csv", preparedness_csv(run.report.days, run.report.preparedness)))
        paths.append(atomic_write(out_dir / f"{prefix}fitted_with_bands.csv", fitted_csv(run.report)))
    return paths
