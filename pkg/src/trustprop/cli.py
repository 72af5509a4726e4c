"""Command line entry point: ``python -m trustprop <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness as hx

log = logging.getLogger("trustprop")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. population.V=98 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled training set")
    _common(p)

    p = sub.add_parser("train", help="train the denoiser and write a checkpoint")
    _common(p)

    p = sub.add_parser("solve", help="trust -> filter -> solvers for one population")
    _common(p)

    p = sub.add_parser("simulate", help="run solve over a grid of population sizes")
    _common(p)
    p.add_argument("--sizes", type=int, nargs="+", default=[58, 78, 98, 118])

    p = sub.add_parser("trust-report", help="per-miner trust records as JSON")
    _common(p)

    p = sub.add_parser("dump-config", help="print the effective config")
    _common(p)
    return parser


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = hx.load_config(args.config, args.overrides, args.seed)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "dump-config":
            print(json.dumps(hx.config_to_dict(cfg), sort_keys=True, indent=2))
        elif args.command == "gen-data":
            tc = cfg.train
            data = hx.gen_dataset(tc.instances, tc.V, cfg.seed, tc.labeler, tc.degraded)
            hx.save_dataset(out / "dataset.json", data)
            print(out / "dataset.json")
        elif args.command == "train":
            params, result = hx.train_model(cfg, log_every=100 if args.verbose else 0)
            hx.save_model(out / "model.ckpt", params, cfg)
            _write_json(out / "train.json", {"config": hx.config_to_dict(cfg), "losses": result.losses,
                                             "seconds": result.seconds})
            print(f"{out / 'model.ckpt'}  final loss {result.losses[-1]:.5f}")
        elif args.command == "solve":
            report = hx.run_experiment(cfg)
            hx.verify_report(report)
            hx.emit_metrics(report, out)
            _summary(report)
        elif args.command == "simulate":
            reports = []
            for V in args.sizes:
                pop = dataclasses.replace(cfg.population, V=V)
                report = hx.run_experiment(dataclasses.replace(cfg, population=pop))
                hx.verify_report(report)
                reports.append(report)
                _summary(report)
            hx.emit_metrics(reports, out)
        elif args.command == "trust-report":
            records = hx.trust_report(cfg)
            _write_json(out / "trust.json", records)
            print(out / "trust.json")
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _summary(report: dict) -> None:
    print(f"V={report['V']} K={report['K']} mean trust {report['mean_trust_all']:.3f} -> "
          f"{report['mean_trust_selected']:.3f}")
    for name, entry in sorted(report["solvers"].items()):
        fr = report["failure_rate"].get(name)
        extra = "" if fr is None else f"  raw failure {fr:.3f}"
        print(f"  {name:<20s} {entry['cost_s']:.4f} s{extra}")


if __name__ == "__main__":
    sys.exit(main())
