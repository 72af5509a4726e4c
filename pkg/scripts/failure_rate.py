#!/usr/bin/env python3
"""Raw-feasibility failure rate of sampled heatmaps, prior vs no_prior start.

    python3 scripts/failure_rate.py model.ckpt --instances 20 --samples 32 --V 20
"""
import argparse
import time

import numpy as np

from trustprop import harness as hx
from trustprop import resfusion as rf
from trustprop import solvers as sv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--V", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    store, gcfg = hx.load_model(args.checkpoint)
    denoiser = rf.make_denoiser(store, gcfg)
    schedule = rf.build_schedule()
    for mode in ("prior", "no_prior"):
        start = time.perf_counter()
        rates = []
        for k in range(args.instances):
            coords = np.random.default_rng([args.seed, args.V, k]).uniform(size=(args.V, 2))
            out = hx.resfusion_solve(coords, sv.distance_matrix(coords), denoiser, schedule,
                                     seed=k, n_samples=args.samples, mode=mode)
            rates.append(out.failure_rate)
        print(f"{mode:9s} failure rate {np.mean(rates):.4f}  ({time.perf_counter() - start:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
