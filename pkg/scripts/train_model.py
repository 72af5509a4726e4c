#!/usr/bin/env python3
"""Generate a training set and fit a denoiser checkpoint.

    python3 scripts/train_model.py --V 20 --steps 8000 --out v20.ckpt
"""
import argparse
import logging

from trustprop import harness as hx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--V", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--instances", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    cfg = hx.load_config(overrides=[f"train.V={args.V}", f"train.steps={args.steps}",
                                    f"train.instances={args.instances}"], seed=args.seed)
    params, result = hx.train_model(cfg, log_every=max(1, args.steps // 20))
    hx.save_model(args.out, params, cfg)
    print(f"trained {args.steps} steps in {result.seconds:.0f}s, wrote {args.out}")


if __name__ == "__main__":
    main()
