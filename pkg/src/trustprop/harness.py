"""Experiment configuration, dataset generation, end-to-end runs, metrics files.

A run goes: miner population -> trust scores -> threshold filter ->
one tour per solver over the trusted miners -> costs in seconds of
block propagation -> JSON report (+ CSV series for plotting).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, is_dataclass
from pathlib import Path
from typing import Sequence, get_type_hints

import numpy as np

from . import gated_gnn as gnn
from . import nn_core as nn
from . import resfusion as rf
from . import solvers as sv
from .miner_network import (ChannelParams, InfeasibleError, MinerSnapshot, Miner, filter_by_trust,
                            leg_time_matrix, load_trajectories, random_positions, synth_population, tour_cost)
from .trust_cloud import MinerProfile, TrustConfig, score_population

log = logging.getLogger(__name__)

SOLVERS = ("greedy", "two_opt", "ga", "held_karp", "resfusion", "resfusion_no_prior")
LABELERS = ("held_karp", "greedy_2opt")


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class PopulationConfig:
    V: int = 118
    malicious_count: int = 19
    slots: int = 10
    field_size: float = 1000.0  # meters; synthetic positions are uniform in the square
    source: str = "synthetic"  # or "trajectory"
    trajectory_csv: str | None = None
    timestamp: float = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def build(self) -> rf.NoiseSchedule:
        return rf.build_schedule(self.T, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class TrainConfig:
    instances: int = 512
    V: int = 20
    labeler: str = "greedy_2opt"
    degraded: str = "greedy"  # or "sequential"
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    lr_schedule: str = "cosine"
    dataset: str | None = None  # read instead of generating when set


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    lam: float = 0.5
    population: PopulationConfig = PopulationConfig()
    channel: ChannelParams = ChannelParams()
    trust: TrustConfig = TrustConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    gnn: gnn.GNNConfig = gnn.GNNConfig(layers=4, width=32)
    ga: sv.GAConfig = sv.GAConfig()
    train: TrainConfig = TrainConfig()
    solvers: tuple[str, ...] = ("greedy", "two_opt", "ga", "resfusion")
    sample_count: int = 32
    checkpoint: str | None = None

    def __post_init__(self):
        unknown = set(self.solvers) - set(SOLVERS)
        if unknown:
            raise ValueError(f"unknown solvers {sorted(unknown)}; choose from {SOLVERS}")
        pop = self.population
        if pop.source not in ("synthetic", "trajectory"):
            raise ValueError(f"unknown population source {pop.source!r}")
        if pop.source == "synthetic" and pop.V < pop.malicious_count + 2:
            raise ValueError("V must be at least malicious_count + 2")
        if pop.source == "trajectory" and not (pop.trajectory_csv and Path(pop.trajectory_csv).exists()):
            raise FileNotFoundError(f"trajectory file not found: {pop.trajectory_csv}")
        if self.checkpoint is not None and not Path(self.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {self.checkpoint}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.train.labeler not in LABELERS:
            raise ValueError(f"unknown labeler {self.train.labeler!r}")


def _build(cls, data: dict):
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kind = hints[name]
        if is_dataclass(kind) and isinstance(value, dict):
            value = _build(kind, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` strings; values parse as JSON, else stay strings."""
    data = config_to_dict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        *path, leaf = key.strip().split(".")
        node = data
        for part in path:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"override {key!r}: {part!r} is not a config section")
            node = node[part]
        if leaf not in node:
            raise ValueError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = _parse_value(raw)
    return config_from_dict(data)


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if path is None else config_from_dict(json.loads(Path(path).read_text()))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return apply_overrides(cfg, overrides)


# ----------------------------------------------------------------- datasets

def label_tour(D: np.ndarray, labeler: str, restarts: int = 8) -> sv.Tour:
    if labeler == "held_karp":
        return sv.held_karp(D)[0]
    if labeler != "greedy_2opt":
        raise ValueError(f"unknown labeler {labeler!r}")
    n = D.shape[0]
    best, best_cost = None, np.inf
    for start in np.linspace(0, n - 1, min(n, restarts)).astype(int):
        tour = sv.two_opt(sv.greedy_tour(D, int(start)), D)
        cost = sv.tour_length(tour, D)
        if cost < best_cost - 1e-12:
            best, best_cost = tour, cost
    return best


def degraded_tour(D: np.ndarray, kind: str = "greedy") -> sv.Tour:
    if kind == "greedy":
        return sv.greedy_tour(D)
    if kind == "sequential":
        return tuple(range(D.shape[0]))
    raise ValueError(f"unknown degraded-tour kind {kind!r}")


def gen_dataset(n_instances: int, V: int, seed: int, labeler: str = "greedy_2opt",
                degraded: str = "greedy") -> list[rf.TrainingInstance]:
    """Uniform unit-square instances with oracle labels and cheap degraded tours."""
    if labeler == "held_karp" and V > sv.HELD_KARP_MAX:
        raise ValueError(f"held_karp labels are limited to V <= {sv.HELD_KARP_MAX}, got {V}")
    if V < 3:
        raise ValueError("instances need at least 3 miners")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        coords = rng.uniform(0.0, 1.0, size=(V, 2))
        D = sv.distance_matrix(coords)
        out.append(rf.TrainingInstance(coords, degraded_tour(D, degraded), label_tour(D, labeler)))
    return out


def save_dataset(path: str | Path, instances: Sequence[rf.TrainingInstance]) -> None:
    rows = [{"coords": inst.coords.tolist(), "degraded": list(inst.degraded), "label": list(inst.label)}
            for inst in instances]
    Path(path).write_text(json.dumps({"version": 1, "instances": rows}, sort_keys=True))


def load_dataset(path: str | Path) -> list[rf.TrainingInstance]:
    raw = json.loads(Path(path).read_text())
    return [rf.TrainingInstance(np.asarray(r["coords"], dtype=np.float64), tuple(r["degraded"]), tuple(r["label"]))
            for r in raw["instances"]]


# ----------------------------------------------------------------- training

def train_model(cfg: ExperimentConfig, instances: Sequence[rf.TrainingInstance] | None = None,
                log_every: int = 0) -> tuple[nn.ParamStore, rf.TrainResult]:
    tc = cfg.train
    if instances is None:
        instances = load_dataset(tc.dataset) if tc.dataset else gen_dataset(
            tc.instances, tc.V, cfg.seed, tc.labeler, tc.degraded)
    params = gnn.init_params(cfg.gnn, cfg.seed)
    result = rf.train(instances, params, cfg.schedule.build(), tc.steps, cfg.gnn, batch_size=tc.batch_size,
                      lr=tc.lr, seed=cfg.seed, lr_schedule=tc.lr_schedule, log_every=log_every)
    return params, result


def save_model(path: str | Path, params: nn.ParamStore, cfg: ExperimentConfig) -> None:
    nn.save_checkpoint(path, params, {"layers": cfg.gnn.layers, "d": cfg.gnn.width,
                                      "coord_scale": cfg.gnn.coord_scale, "seed": cfg.seed})


def load_model(path: str | Path) -> tuple[nn.ParamStore, gnn.GNNConfig]:
    params, meta = nn.load_checkpoint(path)
    return params, gnn.GNNConfig(layers=meta["layers"], width=meta["d"],
                                 coord_scale=meta.get("coord_scale", 100.0))


# ------------------------------------------------------------------ solving

@dataclass
class ResfusionOutcome:
    tour: sv.Tour
    heatmaps: np.ndarray
    failure_rate: float
    denoiser_calls: int


def resfusion_solve(coords, D, denoiser: rf.Denoiser, schedule: rf.NoiseSchedule, seed: int,
                    n_samples: int = 1, mode: str = "prior", degraded: str = "greedy") -> ResfusionOutcome:
    """Sample heatmaps, count raw-infeasible ones, keep the cheapest decoded tour."""
    G_hat = rf.encode_tour(degraded_tour(D, degraded))
    res = rf.sample(G_hat, coords, schedule, denoiser, seed=seed, mode=mode, n_samples=n_samples)
    fails = sum(not sv.feasibility_raw(H) for H in res.heatmaps)
    tours = [sv.decode_heatmap(H, D) for H in res.heatmaps]
    costs = [sv.tour_length(t, D) for t in tours]
    best = tours[int(np.argmin(costs))]
    return ResfusionOutcome(best, res.heatmaps, fails / n_samples, res.denoiser_calls)


def build_population(cfg: ExperimentConfig) -> tuple[MinerSnapshot, list[MinerProfile]]:
    pop = cfg.population
    if pop.source == "trajectory":
        snapshot = load_trajectories(pop.trajectory_csv, pop.timestamp)
        V = len(snapshot)
        if V < pop.malicious_count + 2:
            raise InfeasibleError(f"{V} miners observed, need at least malicious_count + 2")
    else:
        V = pop.V
        pos = random_positions(V, pop.field_size, [cfg.seed, 1])
        snapshot = MinerSnapshot(tuple(Miner(f"m{k:03d}", (float(x), float(y))) for k, (x, y) in enumerate(pos)))
    profiles = synth_population(V, pop.malicious_count, pop.slots, [cfg.seed, 2], cfg.trust)
    profiles = [dataclasses.replace(p, id=m.id) for p, m in zip(profiles, snapshot.miners)]
    return snapshot, profiles


def unit_coords(positions: np.ndarray) -> np.ndarray:
    """Shift and scale positions into the unit square, keeping aspect ratio."""
    lo = positions.min(axis=0)
    span = float(np.max(positions.max(axis=0) - lo))
    return (positions - lo) / (span if span > 0 else 1.0)


def _denoiser_for(cfg: ExperimentConfig, params):
    if params is not None:
        return rf.make_denoiser(params, cfg.gnn)
    if cfg.checkpoint is None:
        raise FileNotFoundError("resfusion solver requested but no checkpoint configured")
    store, gcfg = load_model(cfg.checkpoint)
    return rf.make_denoiser(store, gcfg)


def run_experiment(cfg: ExperimentConfig, params=None) -> dict:
    """Full pipeline; returns a JSON-ready report. ``params`` overrides the checkpoint."""
    snapshot, profiles = build_population(cfg)
    scores = score_population(profiles, dataclasses.replace(cfg.trust, lam=cfg.lam))
    scored = snapshot.with_trust(scores)
    trusted = filter_by_trust(scored, cfg.lam)
    pos = trusted.positions()
    D = leg_time_matrix(pos, cfg.channel)
    coords = unit_coords(pos)
    K = len(trusted)
    solvers, timing, failure = {}, {}, {}

    def record(name, tour, started):
        tour = sv.canonical(sv.check_tour(tour, K))
        timing[name] = time.perf_counter() - started
        solvers[name] = {"tour": [trusted.miners[i].id for i in tour],
                         "cost_s": tour_cost(tour, trusted, cfg.channel)}

    for name in cfg.solvers:
        t0 = time.perf_counter()
        if name == "greedy":
            record(name, sv.greedy_tour(D), t0)
        elif name == "two_opt":
            record(name, sv.two_opt(sv.greedy_tour(D), D), t0)
        elif name == "ga":
            record(name, sv.ga_solve(D, dataclasses.replace(cfg.ga, seed=cfg.seed)), t0)
        elif name == "held_karp":
            if K > sv.HELD_KARP_MAX:
                log.warning("held_karp skipped: K=%d exceeds %d", K, sv.HELD_KARP_MAX)
                continue
            record(name, sv.held_karp(D)[0], t0)
        else:
            mode = "prior" if name == "resfusion" else "no_prior"
            out = resfusion_solve(coords, D, _denoiser_for(cfg, params), cfg.schedule.build(), cfg.seed,
                                  cfg.sample_count, mode, cfg.train.degraded)
            record(name, out.tour, t0)
            solvers[name]["denoiser_calls"] = out.denoiser_calls
            failure[name] = out.failure_rate
    ts_all = scored.trust_scores()
    ts_sel = trusted.trust_scores()
    return {
        "config": config_to_dict(cfg),
        "V": len(snapshot),
        "K": K,
        "lambda": cfg.lam,
        "trusted_ids": trusted.ids,
        "total_trust": float(ts_sel.sum()),
        "mean_trust_all": float(ts_all.mean()),
        "mean_trust_selected": float(ts_sel.mean()),
        "solvers": solvers,
        "failure_rate": failure,
        "sample_count": cfg.sample_count,
        "seeds": {"experiment": cfg.seed, "positions": [cfg.seed, 1], "profiles": [cfg.seed, 2]},
        "trust": [s.record(m.id) | {"malicious": p.malicious, "selected": s.ts_normalized > cfg.lam}
                  for m, s, p in zip(snapshot.miners, scores, profiles)],
        "timing_s": timing,
    }


def strip_timing(report: dict) -> dict:
    """Report without wall-clock entries, for determinism comparisons."""
    return {k: v for k, v in report.items() if k != "timing_s"}


def verify_report(report: dict) -> None:
    """Every tour must be a Hamiltonian cycle over exactly the trusted miners, all above lambda."""
    trust = {r["miner_id"]: r["ts_normalized"] for r in report["trust"]}
    trusted = set(report["trusted_ids"])
    if any(trust[m] <= report["lambda"] for m in trusted):
        raise AssertionError("a selected miner does not clear the trust threshold")
    for name, entry in report["solvers"].items():
        tour = entry["tour"]
        if len(tour) != len(set(tour)) or set(tour) != trusted:
            raise AssertionError(f"{name}: tour is not a cycle over the trusted miners")


# ------------------------------------------------------------------ metrics

def emit_metrics(reports: dict | Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Write report.json, costs.csv (one row per solver x V) and trust.csv."""
    if isinstance(reports, dict):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "costs.csv", out / "trust.csv"]
    body = reports[0] if len(reports) == 1 else {"runs": list(reports)}
    paths[0].write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with paths[1].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["solver", "V", "K", "cost_s", "failure_rate"])
        for rep in reports:
            for name in sorted(rep["solvers"]):
                fr = rep["failure_rate"].get(name, "")
                w.writerow([name, rep["V"], rep["K"], repr(rep["solvers"][name]["cost_s"]), fr])
    with paths[2].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["V", "miner_id", "ts_raw", "ts_normalized", "malicious", "selected"])
        for rep in reports:
            for r in rep["trust"]:
                w.writerow([rep["V"], r["miner_id"], repr(r["ts_raw"]), repr(r["ts_normalized"]),
                            int(r["malicious"]), int(r["selected"])])
    return paths


def trust_report(cfg: ExperimentConfig) -> list[dict]:
    """Per-miner trust records for the configured population."""
    snapshot, profiles = build_population(cfg)
    scores = score_population(profiles, dataclasses.replace(cfg.trust, lam=cfg.lam))
    return [s.record(m.id) for m, s in zip(snapshot.miners, scores)]
