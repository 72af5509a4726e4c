"""Miner population, channel model, propagation-time objective, trust filter."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .solvers import Tour, check_tour
from .trust_cloud import MinerProfile, SlotRecord, TrustConfig, TrustScore


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class ChannelParams:
    block_size: float = 8e6  # bits; 1 MB = 10**6 bytes
    bandwidth: float = 22e6  # Hz
    transmit_power: float = dbm_to_watts(23.0)  # W
    noise_density: float = dbm_to_watts(-174.0)  # W/Hz
    path_loss_exp: float = 3.38
    unit_gain: float = 10.0 ** (-30.0 / 10.0)

    def __post_init__(self):
        bad = [k for k, v in asdict(self).items() if not v > 0]
        if bad:
            raise ValueError(f"channel parameters must be positive: {bad}")


class InfeasibleError(ValueError):
    """Fewer than two miners left to route a block through."""


class MalformedTrajectory(ValueError):
    pass


def propagation_time(dist, params: ChannelParams = ChannelParams()):
    """Seconds to push one block across ``dist`` meters (scalar or array)."""
    d = np.asarray(dist, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("propagation distance must be > 0 (coincident miners?)")
    p = params
    snr = p.unit_gain * p.transmit_power * d ** (-p.path_loss_exp) / (p.noise_density * p.bandwidth)
    out = p.block_size / (p.bandwidth * np.log2(1.0 + snr))
    return float(out) if np.ndim(dist) == 0 else out


def leg_time_matrix(positions, params: ChannelParams = ChannelParams()) -> np.ndarray:
    """Pairwise propagation times; coincident miners are treated as 1 m apart."""
    pos = np.asarray(positions, dtype=np.float64)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    off = ~np.eye(len(pos), dtype=bool)
    dist[off & (dist == 0)] = 1.0
    D = np.zeros_like(dist)
    D[off] = propagation_time(dist[off], params)
    return D


@dataclass(frozen=True)
class Miner:
    id: str
    position: tuple[float, float]
    trust: TrustScore | None = None


@dataclass(frozen=True)
class MinerSnapshot:
    miners: tuple[Miner, ...]
    timestamp: float = 0.0

    def __post_init__(self):
        ids = [m.id for m in self.miners]
        if len(set(ids)) != len(ids):
            raise ValueError("miner ids must be unique")
        if not all(math.isfinite(c) for m in self.miners for c in m.position):
            raise ValueError("miner positions must be finite")

    def __len__(self):
        return len(self.miners)

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.miners]

    def positions(self) -> np.ndarray:
        return np.array([m.position for m in self.miners], dtype=np.float64).reshape(-1, 2)

    def trust_scores(self) -> np.ndarray:
        return np.array([m.trust.ts_normalized if m.trust else np.nan for m in self.miners])

    def with_trust(self, scores: Sequence[TrustScore]) -> "MinerSnapshot":
        if len(scores) != len(self.miners):
            raise ValueError("one trust score per miner")
        return replace(self, miners=tuple(replace(m, trust=s) for m, s in zip(self.miners, scores)))

    def to_json(self) -> str:
        return json.dumps({
            "timestamp": self.timestamp,
            "miners": [{"id": m.id, "position": list(m.position),
                        "trust": None if m.trust is None else asdict(m.trust)} for m in self.miners],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MinerSnapshot":
        raw = json.loads(text)
        miners = tuple(Miner(m["id"], tuple(m["position"]), None if m["trust"] is None else TrustScore(**m["trust"]))
                       for m in raw["miners"])
        return cls(miners, raw["timestamp"])


def tour_cost(tour: Tour, snapshot: MinerSnapshot, params: ChannelParams = ChannelParams()) -> float:
    """Total seconds over every leg of the closed cycle, return leg included."""
    if len(tour) < 2:
        raise ValueError("a propagation tour needs at least 2 miners")
    if len(set(tour)) != len(tour) or not all(0 <= i < len(snapshot) for i in tour):
        raise ValueError(f"tour {tour} does not index distinct snapshot miners")
    pos = snapshot.positions()[list(tour)]
    legs = np.linalg.norm(pos - np.roll(pos, -1, axis=0), axis=1)
    legs[legs == 0] = 1.0
    return float(np.sum(propagation_time(legs, params)))


def filter_by_trust(snapshot: MinerSnapshot, lam: float) -> MinerSnapshot:
    """Keep the miners whose normalized trust is strictly above ``lam``."""
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    if any(m.trust is None for m in snapshot.miners):
        raise ValueError("every miner needs a trust score before filtering")
    kept = tuple(m for m in snapshot.miners if m.trust.ts_normalized > lam)
    if len(kept) < 2:
        raise InfeasibleError(f"only {len(kept)} miner(s) above trust threshold {lam}")
    return replace(snapshot, miners=kept)


# ------------------------------------------------------------ trajectories

def load_trajectories(path: str | Path, timestamp: float) -> MinerSnapshot:
    """Latest position at or before ``timestamp`` per miner (last observation carried forward)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    latest: dict[str, tuple[float, float, float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["miner_id", "t", "x", "y"]:
            raise MalformedTrajectory(f"{path}: expected header miner_id,t,x,y, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise MalformedTrajectory(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            mid = row[0].strip()
            try:
                t, x, y = (float(v) for v in row[1:])
            except ValueError:
                raise MalformedTrajectory(f"{path}:{lineno}: non-numeric field in {row}") from None
            if not (mid and all(map(math.isfinite, (t, x, y)))):
                raise MalformedTrajectory(f"{path}:{lineno}: bad row {row}")
            if t <= timestamp and (mid not in latest or t >= latest[mid][0]):
                latest[mid] = (t, x, y)
    if len(latest) < 2:
        raise InfeasibleError(f"{path}: only {len(latest)} miner(s) observed by t={timestamp}")
    miners = tuple(Miner(mid, (x, y)) for mid, (_, x, y) in sorted(latest.items()))
    return MinerSnapshot(miners, float(timestamp))


def write_trajectories(path: str | Path, rows: Sequence[tuple[str, float, float, float]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["miner_id", "t", "x", "y"])
        w.writerows(rows)


def synth_trajectories(count: int, duration: float, step: float, field_size: float, seed) -> list[tuple]:
    """Random-waypoint style tracks inside a square field, sampled every ``step`` s."""
    rng = np.random.default_rng(seed)
    rows = []
    times = np.arange(0.0, duration + 1e-9, step)
    for k in range(count):
        pos = rng.uniform(0, field_size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(5.0, 15.0)  # m/s, urban vehicle
        for t in times:
            rows.append((f"m{k:03d}", round(float(t), 3), round(float(pos[0]), 3), round(float(pos[1]), 3)))
            heading += rng.normal(0, 0.3)
            pos = np.clip(pos + step * speed * np.array([np.cos(heading), np.sin(heading)]), 0, field_size)
    return rows


# -------------------------------------------------------------- population

# raw indicator ranges: avg block propagation time (s), link quality (dB), active ratio
CAPABILITY_RANGES = ((0.01, 0.2), (0.0, 30.0), (0.0, 1.0))


def synth_population(count: int, malicious_count: int, slots: int, seed,
                     cfg: TrustConfig = TrustConfig()) -> list[MinerProfile]:
    """Synthetic interaction histories: honest miners behave, malicious ones do not.

    Raw capability readings are drawn as a quality in [0, 1] and mapped onto
    each indicator's range in its "good" direction, so the configured
    polarity decides what a good reading looks like.
    """
    if not 0 <= malicious_count < count:
        raise ValueError("need 0 <= malicious_count < count")
    if slots < 2:
        raise ValueError("risk needs at least 2 slots")
    rng = np.random.default_rng(seed)
    bad = set(rng.choice(count, size=malicious_count, replace=False).tolist())
    profiles = []
    for k in range(count):
        evil = k in bad
        p_pos = rng.uniform(0.02, 0.2) if evil else rng.uniform(0.9, 0.99)
        quality = rng.uniform(0.0, 0.12) if evil else rng.uniform(0.75, 0.95)
        records = []
        for _ in range(slots):
            n_int = int(rng.integers(20, 41))
            o = int(rng.binomial(n_int, p_pos))
            wait = cfg.wait_threshold * (rng.uniform(1.2, 3.0) if evil else rng.uniform(0.1, 0.9))
            caps = []
            for (lo, hi), pol in zip(CAPABILITY_RANGES, cfg.polarity):
                q = float(np.clip(quality + rng.normal(0, 0.05), 0, 1))
                caps.append(lo + q * (hi - lo) if pol == "positive" else hi - q * (hi - lo))
            records.append(SlotRecord(o, n_int - o, float(wait), tuple(caps)))
        profiles.append(MinerProfile(f"m{k:03d}", tuple(records), malicious=evil))
    return profiles


def random_positions(count: int, field_size: float, seed) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, field_size, size=(count, 2))


def tour_ids(tour: Tour, snapshot: MinerSnapshot) -> list[str]:
    check_tour(tour, len(snapshot))
    return [snapshot.miners[i].id for i in tour]
