#!/usr/bin/env python3
"""Monte Carlo parameter recovery for the metric-level model.

Draws synthetic riders from a fixed truth, fits each one and reports how
often every estimate lands within ``k`` reported standard errors.

    python3 scripts/recovery_mc.py --reps 100 --sigma 8 --lam 25
"""

import argparse
import time
from dataclasses import dataclass

import numpy as np

from banlab.banister import BanisterParams
from banlab.synth import ScheduleRecipe, SynthConfig, generate_metric_level
from banlab.tp_model import PARAM_NAMES, FitOptions, TpParams, fit


@dataclass
class Experiment:
    reps: int = 100
    alpha: float = 200.0
    beta: float = 5.0
    sigma: float = 8.0
    k_f: float = 2.0
    tau_a: float = 40.0
    tau_f: float = 12.0
    lam: float = 25.0
    n_sessions: int = 150
    n_days: int = 300
    k_se: float = 3.0
    seed0: int = 0


def run(exp: Experiment):
    truth = TpParams(exp.alpha, exp.beta, exp.sigma, BanisterParams(exp.k_f, exp.tau_a, exp.tau_f))
    t_arr = truth.as_array()
    hits = np.zeros(6, dtype=int)
    estimates = []
    no_se = not_converged = 0
    for rep in range(exp.reps):
        cfg = SynthConfig(
            truth,
            n_days=exp.n_days,
            schedule=ScheduleRecipe(n_sessions=exp.n_sessions),
            lambda_policy=exp.lam,
            rng_seed=exp.seed0 + rep,
        )
        d = generate_metric_level(cfg)
        r = fit(d.metrics, d.loads, FitOptions(seed=rep))
        not_converged += not r.converged
        estimates.append(r.params.as_array())
        if r.standard_errors is None:
            no_se += 1
            continue
        se = np.array([r.standard_errors[n] for n in PARAM_NAMES])
        hits += np.abs(r.params.as_array() - t_arr) <= exp.k_se * se
    est = np.array(estimates)
    return hits, est, no_se, not_converged


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in Experiment().__dict__.items():
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(default), default=default)
    exp = Experiment(**vars(ap.parse_args()))
    t0 = time.perf_counter()
    hits, est, no_se, nc = run(exp)
    truth = [exp.alpha, exp.beta, exp.sigma, exp.k_f, exp.tau_a, exp.tau_f]
    print(f"{exp.reps} replicates in {time.perf_counter() - t0:.1f}s; {no_se} without SEs, {nc} not converged")
    print(f"{'param':>6} {'truth':>8} {'median':>9} {'sd':>8} {'within':>7}")
    for k, name in enumerate(PARAM_NAMES):
        print(f"{name:>6} {truth[k]:8.2f} {np.median(est[:, k]):9.3f} {est[:, k].std():8.3f} {hits[k]:>4}/{exp.reps}")


if __name__ == "__main__":
    main()
