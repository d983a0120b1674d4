#!/usr/bin/env python3
"""Compare Hessian standard errors with a session bootstrap on one synthetic rider."""

import argparse

from banlab.banister import BanisterParams
from banlab.synth import ScheduleRecipe, SynthConfig, generate_metric_level
from banlab.tp_model import PARAM_NAMES, TpParams, bootstrap_standard_errors, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--boot", type=int, default=200)
    args = ap.parse_args()

    cfg = SynthConfig(
        TpParams(200.0, 5.0, 8.0, BanisterParams(2.0, 40.0, 12.0)),
        schedule=ScheduleRecipe(n_sessions=150),
        rng_seed=args.seed,
    )
    d = generate_metric_level(cfg)
    r = fit(d.metrics, d.loads)
    robust = bootstrap_standard_errors(d.metrics, d.loads, r, n_boot=args.boot, seed=args.seed)
    plain = bootstrap_standard_errors(d.metrics, d.loads, r, n_boot=args.boot, seed=args.seed, robust=False)
    print(f"{'param':>6} {'est':>9} {'hessian':>9} {'boot iqr':>9} {'boot sd':>10}")
    for n in PARAM_NAMES:
        print(f"{n:>6} {r.params.as_dict()[n]:9.3f} {r.standard_errors[n]:9.3f} {robust[n]:9.3f} {plain[n]:10.3g}")


if __name__ == "__main__":
    main()
