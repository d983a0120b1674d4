"""``banlab`` command-line interface.

Exit codes: 0 success, 1 validation error, 2 numeric non-convergence,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .banister import BanisterError, BanisterParams, preparedness, timing_quantities
from .ingest import IngestError, load_history, meta_path, rider_files, write_history
from .metrics import MetricError, MetricOptions, MetricSeries, build_metric_series, canonical_kind
from .report import (
    TABLE2_HEADER,
    TABLE3_HEADER,
    MetricRun,
    SHORT_KIND,
    RunManifest,
    atomic_write,
    csv_text,
    file_digest,
    format_table2,
    json_text,
    loads_csv,
    metrics_csv,
    preparedness_csv,
    read_loads_csv,
    report_all_metrics,
    run_metric,
    write_metric_artifacts,
)
from .synth import SynthError, config_to_dict, generate_metric_level, generate_raw_level, load_config
from .tp_model import FitError, FitOptions, fit, progression_report
from .training_load import TrainingLoadError, build_daily_loads

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _default_seed() -> int:
    return int(os.environ.get("BANLAB_SEED", "0"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="banlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"banlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def rider_args(sp):
        sp.add_argument("--dir", default=".", help="directory holding the rider's session files")
        sp.add_argument("--rider", required=True)

    sp = sub.add_parser("ingest", help="validate session files and summarise them")
    rider_args(sp)

    sp = sub.add_parser("trimp", help="daily training loads as CSV day,load")
    rider_args(sp)
    sp.add_argument("--raw", action="store_true", help="raw TRIMP units instead of normalised")
    sp.add_argument("--out")

    def banister_args(sp):
        sp.add_argument("--kf", type=float, required=True)
        sp.add_argument("--taua", type=float, required=True)
        sp.add_argument("--tauf", type=float, required=True)

    sp = sub.add_parser("preparedness", help="preparedness series as CSV day,W")
    rider_args(sp)
    banister_args(sp)
    sp.add_argument("--raw", action="store_true")
    sp.add_argument("--out")

    sp = sub.add_parser("timing", help="single-bout t0, t* and t_half")
    banister_args(sp)
    sp.add_argument("--json", action="store_true", help="full precision JSON")

    def metric_args(sp, kinds):
        sp.add_argument("--kind", required=True, choices=kinds)
        sp.add_argument("--d", type=float, default=10.0, help="duration (s) for the pd metric")
        sp.add_argument("--hq-pct", type=float, default=75.0)
        sp.add_argument("--hq", type=float, help="explicit heart-rate threshold (bpm)")
        sp.add_argument("--pq", type=float, help="explicit power threshold (W)")
        sp.add_argument("--pq-pct", type=float, default=75.0)
        sp.add_argument("--lag", type=int, default=15)

    sp = sub.add_parser("metrics", help="per-session metric as CSV session,day,value,lambda")
    rider_args(sp)
    metric_args(sp, ["phq", "hpq", "pd", "p0"])
    sp.add_argument("--out")

    def fit_args(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--starts", type=int, default=9)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("fit", help="fit the training-performance model")
    sp.add_argument("--dir", default=".")
    sp.add_argument("--rider")
    sp.add_argument("--metrics-csv", help="fit a metric CSV instead of a rider history")
    sp.add_argument("--loads-csv", help="daily loads CSV accompanying --metrics-csv")
    metric_args(sp, ["phq", "hpq", "pd", "p0"])
    fit_args(sp)

    sp = sub.add_parser("report", help="tables and figure series for one or all metrics")
    rider_args(sp)
    metric_args(sp, ["phq", "hpq", "pd", "p0", "all"])
    fit_args(sp)

    sp = sub.add_parser("simulate", help="generate a synthetic rider")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--raw", action="store_true", help="emit raw session files")
    return p


def _metric_options(args) -> MetricOptions:
    return MetricOptions(
        lag_s=args.lag, h_q=args.hq, hq_pct=args.hq_pct, p_q=args.pq, pq_pct=args.pq_pct, d_s=args.d
    )


def _fit_options(args) -> FitOptions:
    seed = args.seed if args.seed is not None else _default_seed()
    return FitOptions(seed=seed, n_starts=args.starts, workers=args.workers)


def _history(args):
    if not rider_files(args.dir, args.rider):
        raise IngestError(f"no history found for rider {args.rider!r} in {args.dir}")
    return load_history(args.dir, args.rider)


def _history_inputs(h) -> list:
    """Session CSVs plus their metadata sidecars."""
    return [str(p) for s in h.sessions for p in (s.source, meta_path(s.source))]


def _manifest(args, argv, inputs, seed=None) -> RunManifest:
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    return RunManifest(args.command, list(argv), flags, {str(p): file_digest(p) for p in sorted(inputs)}, seed)


def _emit(text: str, out, manifest: RunManifest | None = None):
    if out:
        atomic_write(out, text)
        if manifest is not None:
            manifest.write(str(out) + ".manifest.json")
    else:
        sys.stdout.write(text)


def cmd_ingest(args, argv):
    h = _history(args)
    for s in h.sessions:
        mean_hr = f"{float(s.hr[~s.hr_absent].mean()):.1f}" if s.has_hr else "NA"
        print(
            f"session={s.session_index} day={s.day_number} samples={s.n_samples} "
            f"duration_min={s.duration_min:.2f} temperature_c={s.temperature:g} "
            f"segments={len(s.segments)} mean_power_w={float(s.power.mean()):.1f} "
            f"mean_hr_bpm={mean_hr} hr_missing={int(s.hr_absent.sum())}"
        )
    print(f"rider={h.rider_id} sessions={h.n} training_period={h.training_period}")
    return EXIT_OK


def cmd_trimp(args, argv):
    h = _history(args)
    loads = build_daily_loads(h, normalize=not args.raw)
    _emit(loads_csv(loads), args.out, _manifest(args, argv, _history_inputs(h)) if args.out else None)
    if not args.raw:
        print(f"# normalization_constant={loads.normalization_constant!r}", file=sys.stderr)
    return EXIT_OK


def cmd_preparedness(args, argv):
    h = _history(args)
    loads = build_daily_loads(h, normalize=not args.raw)
    W = preparedness(loads, BanisterParams(args.kf, args.taua, args.tauf))
    text = preparedness_csv(range(1, len(W) + 1), W)
    _emit(text, args.out, _manifest(args, argv, _history_inputs(h)) if args.out else None)
    return EXIT_OK


def cmd_timing(args, argv):
    tq = timing_quantities(BanisterParams(args.kf, args.taua, args.tauf))
    if args.json:
        print(json.dumps({"t0": tq.t0, "t_star": tq.t_star, "t_half": tq.t_half, "crosses": tq.crosses}))
    else:
        print(f"t0={tq.t0:.1f} t*={tq.t_star:.1f} t_half={tq.t_half:.1f}")
        if not tq.crosses:
            print("no zero crossing: response never rises through baseline", file=sys.stderr)
    return EXIT_OK


def cmd_metrics(args, argv):
    h = _history(args)
    m = build_metric_series(h, args.kind, _metric_options(args))
    for idx, reason in sorted(m.omitted.items()):
        print(f"# omitted session {idx}: {reason}", file=sys.stderr)
    _emit(metrics_csv(m), args.out, _manifest(args, argv, _history_inputs(h)) if args.out else None)
    return EXIT_OK


def _print_row(label: str, run: MetricRun):
    print(format_table2([(label, run.result, run.error or "")]))
    if run.result is not None:
        print(f"beta_x_delta_w_max={run.result.delta_w_progress:.1f}")


def cmd_fit(args, argv):
    fopts = _fit_options(args)
    out = Path(args.out)
    if args.metrics_csv:
        if not args.loads_csv:
            raise UsageError("--metrics-csv requires --loads-csv")
        metrics = MetricSeries.from_csv(args.metrics_csv, args.kind)
        loads = read_loads_csv(args.loads_csv)
        inputs = [args.metrics_csv, args.loads_csv]
        run = MetricRun(metrics.kind, metrics=metrics)
        run.result = fit(metrics, loads, fopts)
        if run.result.converged:
            run.report = progression_report(run.result, metrics, loads)
        label = args.kind
    else:
        if not args.rider:
            raise UsageError("fit needs --rider or --metrics-csv")
        h = _history(args)
        loads = build_daily_loads(h)
        run = run_metric(h, args.kind, loads, _metric_options(args), fopts)
        if run.result is None:
            raise MetricError(run.error or "metric estimation failed")
        inputs = _history_inputs(h)
        label = f"{args.rider}:{args.kind}"
    write_metric_artifacts(run, out)
    _manifest(args, argv, inputs, fopts.seed).write(out / "manifest.json")
    _print_row(label, run)
    if not run.result.converged:
        print("fit did not converge: top starts disagree", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_report(args, argv):
    h = _history(args)
    fopts = _fit_options(args)
    out = Path(args.out)
    kinds = ("phq", "hpq", "pd", "p0") if args.kind == "all" else (args.kind,)
    rep = report_all_metrics(h, fopts.seed, kinds, _metric_options(args), fopts)
    for run in rep.runs:
        write_metric_artifacts(run, out, prefix=f"{args.rider}_{_short(run.kind)}_")
    atomic_write(out / f"{args.rider}_table2.csv", csv_text(["rider", *TABLE2_HEADER], [[args.rider, *r] for r in rep.table2_rows()]))
    atomic_write(out / f"{args.rider}_table3.csv", csv_text(["rider", *TABLE3_HEADER], [[args.rider, *r] for r in rep.table3_rows()]))
    atomic_write(
        out / f"{args.rider}_report.json",
        json_text(
            {
                "rider": args.rider,
                "normalization_constant": rep.normalization_constant,
                "metrics": {
                    _short(r.kind): {
                        "fit": r.result.to_dict() if r.result else None,
                        "relative_progression": r.report.relative_progression if r.report else None,
                        "omitted_sessions": {str(k): v for k, v in sorted(r.metrics.omitted.items())} if r.metrics else {},
                        "error": r.error,
                    }
                    for r in rep.runs
                },
            }
        ),
    )
    _manifest(args, argv, _history_inputs(h), fopts.seed).write(out / f"{args.rider}_manifest.json")
    print(rep.table2())
    print()
    print("metric\tbeta_x_delta_w_max")
    for label, dwp, _ in rep.table3_rows():
        print(f"{label}\t{dwp:.1f}")
    for r in rep.runs:
        if r.error:
            print(f"{_short(r.kind)}: {r.error}", file=sys.stderr)
    return EXIT_OK if rep.ok else EXIT_NONCONVERGED


def _short(kind: str) -> str:
    return SHORT_KIND[canonical_kind(kind)]


def cmd_simulate(args, argv):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.raw:
        data = generate_raw_level(cfg)
        write_history(data.history, out)
        truth = data.truth.as_dict()
    else:
        data = generate_metric_level(cfg)
        atomic_write(out / "metrics.csv", metrics_csv(data.metrics))
        atomic_write(out / "loads.csv", loads_csv(data.loads))
        truth = data.truth.as_dict()
    atomic_write(out / "truth.json", json_text({"truth": truth, "config": config_to_dict(cfg)}))
    _manifest(args, argv, [args.config], cfg.rng_seed).write(out / "manifest.json")
    print(f"wrote synthetic rider {cfg.rider_id!r} to {out}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "trimp": cmd_trimp,
    "preparedness": cmd_preparedness,
    "timing": cmd_timing,
    "metrics": cmd_metrics,
    "fit": cmd_fit,
    "report": cmd_report,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"banlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitError as exc:
        print(f"banlab: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (IngestError, TrainingLoadError, MetricError, BanisterError, SynthError, ValueError, OSError) as exc:
        print(f"banlab: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
