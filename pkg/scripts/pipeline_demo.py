#!/usr/bin/env python3
"""Raw files to fitted model for one synthetic rider.

Generates sample-level session files, reads them back, estimates all four
performance metrics and prints the comparison tables.  Outputs go to
``--out`` (default ./demo_out).
"""

import argparse
from pathlib import Path

from banlab.banister import BanisterParams
from banlab.cli import main as cli_main
from banlab.ingest import load_history, write_history
from banlab.report import report_all_metrics
from banlab.synth import RawConfig, ScheduleRecipe, SynthConfig, generate_raw_level
from banlab.tp_model import TpParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--sessions", type=int, default=120)
    args = ap.parse_args()

    out = Path(args.out)
    cfg = SynthConfig(
        TpParams(250.0, 15.0, 5.0, BanisterParams(2.0, 40.0, 12.0)),
        n_days=300,
        schedule=ScheduleRecipe(n_sessions=args.sessions),
        raw=RawConfig(duration_min=45),
        rng_seed=args.seed,
        rider_id="demo",
    )
    data = generate_raw_level(cfg)
    write_history(data.history, out / "sessions")
    print("truth:", {k: round(v, 3) for k, v in data.truth.as_dict().items()})

    history = load_history(out / "sessions", "demo")
    rep = report_all_metrics(history, seed=args.seed)
    print(rep.table2())
    print()
    for label, dwp, rel in rep.table3_rows():
        print(f"{label}\tbeta*dW={dwp:.1f}\trelative={rel:.3f}")

    # the same thing through the command line, writing every artifact
    code = cli_main(["report", "--dir", str(out / "sessions"), "--rider", "demo", "--kind", "all",
                     "--seed", str(args.seed), "--out", str(out / "report")])
    print(f"\ncli report exit code {code}; artifacts in {out / 'report'}")


if __name__ == "__main__":
    main()
