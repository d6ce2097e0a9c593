"""Synthetic sweep table: every preset under control, (1.5, 1) and (2, 1.5).

    python scripts/table1.py --points 10 --trials 20 --n-seeds 10 --out table1.csv
"""

import argparse
import sys
import time
from pathlib import Path

from misinfo_dropout.controller import ControlConfig
from misinfo_dropout.experiments import PRESETS, GridRange, SyntheticConfig, run_sweep, table1_csv

CONTROLS = [None, ControlConfig(1.5, 1.0), ControlConfig(2.0, 1.5)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=10)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--n-seeds", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--solver", choices=["lp", "convex"], default="lp")
    ap.add_argument("--presets", nargs="+", default=list(PRESETS))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    results = []
    for name in args.presets:
        for ctl in CONTROLS:
            if ctl is not None and args.solver != "lp":
                ctl = ControlConfig(ctl.alpha, ctl.lam, solver=args.solver)
            cfg = SyntheticConfig.preset(
                name, x_range=GridRange(0.0, 0.01, args.points), y_range=GridRange(0.0, 0.001, args.points),
                trials_per_cell=args.trials, n_seeds=args.n_seeds, control=ctl, seed=args.seed,
                workers=args.workers)
            t0 = time.perf_counter()
            results.append(run_sweep(cfg))
            print(f"{name} {cfg.control_name}: {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    text = table1_csv(results)
    if args.out:
        args.out.write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
