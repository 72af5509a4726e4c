#!/usr/bin/env python3
"""Print the shortcut step T' for a grid of linear noise schedules."""
import argparse

import numpy as np

from trustprop import resfusion as rf


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=int, nargs="+", default=[100, 250, 500, 1000, 2000])
    ap.add_argument("--beta-max", type=float, nargs="+", default=[0.01, 0.02, 0.05])
    ap.add_argument("--beta-min", type=float, default=1e-4)
    args = ap.parse_args()

    print(f"{'T':>6} {'beta_max':>9} {'T_prime':>8} {'sqrt_ab':>8} {'saved':>6}")
    for T in args.T:
        for bmax in args.beta_max:
            s = rf.build_schedule(T, args.beta_min, bmax)
            root = float(np.sqrt(s.alpha_bars[s.t_prime]))
            print(f"{T:6d} {bmax:9.3f} {s.t_prime:8d} {root:8.4f} {1 - s.t_prime / T:6.1%}")


if __name__ == "__main__":
    main()
