#!/usr/bin/env python3
"""Propagation cost of every configured solver across population sizes.

Writes report.json / costs.csv / trust.csv under --out.

    python3 scripts/cost_sweep.py --sizes 58 78 98 118 --checkpoint model.ckpt
"""
import argparse
import logging

from trustprop import harness as hx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[58, 78, 98, 118])
    ap.add_argument("--malicious-frac", type=float, default=19 / 118)
    ap.add_argument("--checkpoint", default=None, help="adds the resfusion solver when given")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    solvers = ["greedy", "two_opt", "ga"] + (["resfusion"] if args.checkpoint else [])
    base = [f"solvers={solvers!r}".replace("'", '"')]
    if args.checkpoint:
        base.append(f"checkpoint={args.checkpoint}")
    reports = []
    for V in args.sizes:
        cfg = hx.load_config(overrides=base + [f"population.V={V}",
                                               f"population.malicious_count={round(V * args.malicious_frac)}"],
                             seed=args.seed)
        rep = hx.run_experiment(cfg)
        reports.append(rep)
        print(f"V={V:4d} K={rep['K']:4d} " + "  ".join(f"{k}={v['cost_s']:.3f}s" for k, v in rep["solvers"].items()))
    for p in hx.emit_metrics(reports, args.out):
        print("wrote", p)


if __name__ == "__main__":
    main()
