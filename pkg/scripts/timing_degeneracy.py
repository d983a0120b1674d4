#!/usr/bin/env python3
"""Single-bout timing and the two-session optimum.

Prints t0, t* and t_half for a parameter set, then scans every pair of
session times and shows that the best schedule puts both sessions on the
same day, t* days before the target.
"""

import argparse

import numpy as np

from banlab.banister import BanisterParams, single_bout_response, timing_quantities, two_session_response


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kf", type=float, default=2.0)
    ap.add_argument("--taua", type=float, default=8.0)
    ap.add_argument("--tauf", type=float, default=2.0)
    ap.add_argument("--grid", type=int, default=600)
    args = ap.parse_args()

    p = BanisterParams(args.kf, args.taua, args.tauf)
    tq = timing_quantities(p)
    print(f"t0={tq.t0:.3f}  t*={tq.t_star:.3f}  t_half={tq.t_half:.3f}  (crosses zero: {tq.crosses})")

    t = np.arange(0, 31)
    for day, w in zip(t, single_bout_response(1.0, p, t)):
        print(f"{day:3d} {w:+.4f} " + "#" * int(max(w, 0) * 60))

    grid = np.linspace(0, 4 * tq.t_star, args.grid)
    T, S = np.meshgrid(grid, grid, indexing="ij")
    vals = np.where(S <= T, two_session_response(p, T, np.minimum(S, T)), -np.inf)
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    print(f"\nbest (t, s) on grid: ({grid[i]:.3f}, {grid[j]:.3f}), value {vals[i, j]:.4f}")
    print(f"2 W(t*) = {2 * single_bout_response(1.0, p, tq.t_star):.4f}")


if __name__ == "__main__":
    main()
