"""Cloud-model trust scoring of miners.

A cloud is summarized by ``(ex, en, he)``: expectation, entropy, and
hyper-entropy. Each miner gets a reputation cloud and a trustworthiness
cloud from its per-slot drops, plus two risk clouds built from how those
drops move between consecutive slots. The four are folded into one raw
score, then normalized across the population.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

RISK_LOWER, RISK_UPPER = -1.0, 1.0
TS_RAW_MIN, TS_RAW_MAX = -1.0, 1.0 / math.e


@dataclass(frozen=True)
class CloudDigest:
    ex: float
    en: float
    he: float

    def __post_init__(self):
        if not (math.isfinite(self.ex) and math.isfinite(self.en) and math.isfinite(self.he)):
            raise ValueError(f"non-finite cloud digest {self}")
        if self.en < 0 or self.he < 0:
            raise ValueError(f"entropy and hyper-entropy must be >= 0, got {self}")


@dataclass(frozen=True)
class SlotRecord:
    """What one time slot reveals about a miner."""

    positive: int
    negative: int
    block_wait_time: float
    capabilities: tuple[float, ...]  # raw readings, one per indicator


@dataclass(frozen=True)
class MinerProfile:
    id: str
    slots: tuple[SlotRecord, ...]
    malicious: bool = False

    @property
    def positive_interactions(self) -> int:
        return sum(s.positive for s in self.slots)

    @property
    def negative_interactions(self) -> int:
        return sum(s.negative for s in self.slots)


@dataclass(frozen=True)
class TrustConfig:
    eta: float = 0.2
    wait_threshold: float = 2.0  # seconds
    weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    # avg propagation time, link quality, active-interaction ratio
    polarity: tuple[str, ...] = ("positive", "positive", "negative")
    lam: float = 0.5
    literal_he: bool = False  # He = sqrt(B^2 - En^2) as printed
    literal_negative_scale: bool = False  # (min - x)/(max - min) as printed
    normalization: str = "minmax"  # or "bounds": fixed analytic range [-1, 1/e]

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")
        if len(self.weights) != len(self.polarity):
            raise ValueError("one polarity per weight")
        if any(p not in ("positive", "negative") for p in self.polarity):
            raise ValueError(f"polarity entries must be 'positive' or 'negative': {self.polarity}")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if not 0 < self.lam < 1:
            raise ValueError("lambda must lie in (0, 1)")
        if self.normalization not in ("minmax", "bounds"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class TrustScore:
    s_rep: float
    s_tw: float
    risk_rep: float
    risk_tw: float
    ts_raw: float
    ts_normalized: float = field(default=float("nan"))

    def record(self, miner_id: str) -> dict:
        return {"miner_id": miner_id, **asdict(self)}


# ------------------------------------------------------------- generators

def backward_cloud(drops: Sequence[float], literal_he: bool = False) -> CloudDigest:
    """Estimate ``(ex, en, he)`` from observed drops.

    ``en`` comes from the mean absolute deviation, ``he`` from the gap
    between the variance and ``en**2`` (clamped at zero).
    """
    x = np.asarray(drops, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("backward_cloud needs a non-empty 1-D drop series")
    if not np.all(np.isfinite(x)):
        raise ValueError("drops must be finite")
    ex = float(x.mean())
    dev = x - ex
    en = math.sqrt(math.pi / 2.0) * float(np.abs(dev).mean())
    var = float(np.mean(dev * dev))
    radicand = (var * var if literal_he else var) - en * en
    return CloudDigest(ex, en, math.sqrt(max(0.0, radicand)))


def forward_cloud(digest: CloudDigest, n: int, seed=None) -> np.ndarray:
    """Normal cloud generator: per drop, ``en' ~ N(en, he^2)`` then ``x ~ N(ex, en'^2)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    en_prime = np.maximum(rng.normal(digest.en, digest.he, size=n), 0.0)
    return digest.ex + en_prime * rng.standard_normal(n)


# ------------------------------------------------------------ trust values

def reputation_value(record: SlotRecord, cfg: TrustConfig = TrustConfig()) -> float:
    total = record.positive + record.negative
    if total <= 0:
        raise ValueError("reputation needs at least one interaction")
    bonus = cfg.eta if record.block_wait_time < cfg.wait_threshold else 0.0
    return record.positive / total + bonus


def capability_scale(value: float, lo: float, hi: float, polarity: str = "positive",
                     literal: bool = False) -> float:
    if not hi > lo:
        raise ValueError(f"degenerate capability range [{lo}, {hi}]")
    if polarity == "positive":
        return (value - lo) / (hi - lo)
    if polarity == "negative":
        return ((lo - value) if literal else (hi - value)) / (hi - lo)
    raise ValueError(f"unknown polarity {polarity!r}")


def trustworthiness_value(scaled_caps: Sequence[float], weights: Sequence[float]) -> float:
    if len(scaled_caps) != len(weights):
        raise ValueError("one weight per capability")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(weights)}")
    return float(np.dot(scaled_caps, weights))


def risk_value(x_prev: float, x_next: float) -> float:
    return ((x_next - x_prev) - RISK_LOWER) / (RISK_UPPER - RISK_LOWER)


def cloud_score(digest: CloudDigest) -> float:
    return digest.ex * math.exp(-digest.he) + digest.ex


def risk_membership(x: float, risk: CloudDigest) -> float:
    """Expected membership of ``x`` in the risk cloud (Gaussian bell at ``ex``)."""
    if risk.en == 0:
        return 1.0 if x == risk.ex else 0.0
    return math.exp(-((x - risk.ex) ** 2) / (2.0 * risk.en**2))


def final_trust_score(s_rep: float, s_tw: float, riskc_rep: float, riskc_tw: float) -> float:
    return (s_rep + s_tw - math.exp(riskc_rep) - math.exp(riskc_tw)) / (2.0 * math.e)


def normalize_population(raw_scores: Sequence[float]) -> list[float]:
    """Min-max over the snapshot; a zero spread maps everyone to 0.5."""
    x = np.asarray(raw_scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty population")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return [0.5] * x.size
    return ((x - lo) / (hi - lo)).tolist()


def normalize_bounds(raw_scores: Sequence[float]) -> list[float]:
    """Map through the fixed analytic range of the raw score instead of the sample range."""
    x = np.asarray(raw_scores, dtype=np.float64)
    return np.clip((x - TS_RAW_MIN) / (TS_RAW_MAX - TS_RAW_MIN), 0.0, 1.0).tolist()


# -------------------------------------------------------------- population

def _scaled_capabilities(profiles: Sequence[MinerProfile], cfg: TrustConfig) -> np.ndarray:
    """(miners, slots, indicators) in [0, 1]; ranges are per slot across the population."""
    raw = np.array([[s.capabilities for s in p.slots] for p in profiles], dtype=np.float64)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    out = np.empty_like(raw)
    for s in range(raw.shape[1]):
        for y, pol in enumerate(cfg.polarity):
            if hi[s, y] == lo[s, y]:
                log.warning("capability %d is constant in slot %d; using 0.5", y, s)
                out[:, s, y] = 0.5
                continue
            out[:, s, y] = [capability_scale(v, lo[s, y], hi[s, y], pol, cfg.literal_negative_scale)
                            for v in raw[:, s, y]]
    return out


def _risk_drops(series: np.ndarray) -> np.ndarray:
    return np.array([risk_value(a, b) for a, b in zip(series[:-1], series[1:])])


def score_miner(rep_drops, tw_drops, cfg: TrustConfig = TrustConfig()) -> TrustScore:
    """Raw trust score from one miner's per-slot reputation and trustworthiness drops."""
    rep_drops = np.asarray(rep_drops, dtype=np.float64)
    tw_drops = np.asarray(tw_drops, dtype=np.float64)
    if rep_drops.size < 2 or tw_drops.size < 2:
        raise ValueError("risk needs at least two consecutive slots")
    s_rep = cloud_score(backward_cloud(rep_drops, cfg.literal_he))
    s_tw = cloud_score(backward_cloud(tw_drops, cfg.literal_he))
    risk_rep = risk_membership(s_rep, backward_cloud(_risk_drops(rep_drops), cfg.literal_he))
    risk_tw = risk_membership(s_tw, backward_cloud(_risk_drops(tw_drops), cfg.literal_he))
    return TrustScore(s_rep, s_tw, risk_rep, risk_tw, final_trust_score(s_rep, s_tw, risk_rep, risk_tw))


def score_population(profiles: Sequence[MinerProfile], cfg: TrustConfig = TrustConfig()) -> list[TrustScore]:
    if not profiles:
        raise ValueError("empty population")
    caps = _scaled_capabilities(profiles, cfg)
    weights = np.asarray(cfg.weights)
    scores = []
    for p, c in zip(profiles, caps):
        # reputations above 1 (the wait bonus) are clipped to the [0, 1] drop domain
        rep = np.array([min(1.0, reputation_value(s, cfg)) for s in p.slots])
        scores.append(score_miner(rep, c @ weights, cfg))
    norm = normalize_population if cfg.normalization == "minmax" else normalize_bounds
    ts = norm([s.ts_raw for s in scores])
    return [TrustScore(s.s_rep, s.s_tw, s.risk_rep, s.risk_tw, s.ts_raw, t) for s, t in zip(scores, ts)]
