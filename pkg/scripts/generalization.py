#!/usr/bin/env python3
"""Evaluate one checkpoint on other problem sizes against size-matched checkpoints.

    python3 scripts/generalization.py v20.ckpt --at 10=v10.ckpt 30=v30.ckpt
"""
import argparse

import numpy as np

from trustprop import harness as hx
from trustprop import miner_network as mn
from trustprop import resfusion as rf
from trustprop import solvers as sv


def mean_cost(denoiser, V, n, samples, seed):
    schedule = rf.build_schedule()
    costs = []
    for k in range(n):
        coords = np.random.default_rng([seed, V, k]).uniform(size=(V, 2))
        D = mn.leg_time_matrix(coords * 1000.0)
        tour = hx.resfusion_solve(coords, D, denoiser, schedule, seed=k, n_samples=samples).tour
        costs.append(sv.tour_length(tour, D))
    return float(np.mean(costs))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--at", nargs="+", required=True, metavar="V=CKPT")
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--samples", type=int, default=1)
    ap.add_argument("--seed", type=int, default=99)
    args = ap.parse_args()

    main_den = rf.make_denoiser(*hx.load_model(args.checkpoint))
    for item in args.at:
        V, ckpt = item.split("=", 1)
        V = int(V)
        ours = mean_cost(main_den, V, args.instances, args.samples, args.seed)
        base = mean_cost(rf.make_denoiser(*hx.load_model(ckpt)), V, args.instances, args.samples, args.seed)
        print(f"V={V}: transferred {ours:.4f}s  size-matched {base:.4f}s  gap {100 * (ours / base - 1):+.2f}%")


if __name__ == "__main__":
    main()
