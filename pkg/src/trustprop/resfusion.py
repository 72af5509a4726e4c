"""Residual graph diffusion: schedule, tour encoding, training, reverse sampling.

Heatmaps live in a +/-1 domain while diffusing (+1 on tour edges, -1
elsewhere, 0 on the diagonal). The forward process blends the clean tour
``G0`` with the residual ``R = G_hat - G0`` toward a degraded tour, so the
reverse chain can start part-way down from a noised copy of ``G_hat``
instead of from pure noise.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gated_gnn as gnn
from . import nn_core as nn
from .solvers import Tour, check_tour

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step ``t`` in 0..T; entry 0 is the clean state (alpha_bar = 1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_tildes: np.ndarray
    t_prime: int

    @property
    def T(self) -> int:
        return len(self.betas) - 1


class NonFiniteState(FloatingPointError):
    pass


def compute_t_prime(schedule_or_alpha_bars) -> int:
    """Smallest 1-based step whose sqrt(alpha_bar) is closest to 1/2."""
    if isinstance(schedule_or_alpha_bars, NoiseSchedule):
        ab = schedule_or_alpha_bars.alpha_bars[1:]
    else:
        ab = np.asarray(schedule_or_alpha_bars, dtype=np.float64)
    if ab.ndim != 1 or ab.size == 0:
        raise ValueError("need at least one alpha_bar value")
    gap = np.abs(np.sqrt(ab) - 0.5)
    return int(np.flatnonzero(gap <= gap.min() + TIE_TOL)[0]) + 1


def schedule_from_betas(betas) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("need a non-empty 1-D beta sequence")
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("betas must lie in (0, 1)")
    if b.size > 1 and np.any(np.diff(b) <= 0):
        raise ValueError("betas must be strictly increasing")
    betas = np.concatenate([[0.0], b])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    beta_tildes = np.zeros_like(betas)
    beta_tildes[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(betas, alphas, alpha_bars, beta_tildes, compute_t_prime(alpha_bars[1:]))


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if T == 1:
        if not 0 < beta_min < 1:
            raise ValueError("beta_min must lie in (0, 1)")
        return schedule_from_betas([beta_min])
    if not 0 < beta_min < beta_max < 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    return schedule_from_betas(np.linspace(beta_min, beta_max, T))


# ----------------------------------------------------------------- encoding

def encode_tour(tour: Tour, V: int | None = None) -> np.ndarray:
    """+1 on cycle edges (both directions), -1 elsewhere, 0 on the diagonal."""
    tour = check_tour(tour, V)
    n = len(tour)
    G = -np.ones((n, n))
    t = np.asarray(tour)
    nxt = np.roll(t, -1)
    G[t, nxt] = 1.0
    G[nxt, t] = 1.0
    np.fill_diagonal(G, 0.0)
    return G


def to_unit(G) -> np.ndarray:
    """Map a +/-1 heatmap onto [0, 1] scores."""
    return 0.5 * (np.asarray(G) + 1.0)


def sym_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal matrices (..., V, V), symmetric with a zero diagonal."""
    *lead, V, V2 = shape
    if V != V2:
        raise ValueError(f"noise must be square in its last two axes, got {shape}")
    z = rng.standard_normal((*lead, V, V))
    z = np.triu(z, k=1)
    return z + np.swapaxes(z, -1, -2)


def _coef(table: np.ndarray, t, ndim: int):
    """Gather per-sample schedule entries and shape them to broadcast over (V, V)."""
    v = table[np.asarray(t)]
    return v.reshape(np.shape(v) + (1,) * (ndim - np.ndim(v))) if np.ndim(v) else v


def forward_sample(G0, G_hat, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form G_t = sqrt(ab) G0 + (1 - sqrt(ab)) R + sqrt(1 - ab) eps."""
    G0, G_hat, eps = (np.asarray(a, dtype=np.float64) for a in (G0, G_hat, eps))
    if not (G0.shape == G_hat.shape == eps.shape):
        raise nn.ShapeError(f"forward_sample: G0 {G0.shape}, G_hat {G_hat.shape}, eps {eps.shape}")
    if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > schedule.T):
        raise ValueError(f"t must lie in 1..{schedule.T}")
    sab = np.sqrt(_coef(schedule.alpha_bars, t, G0.ndim))
    R = G_hat - G0
    return sab * G0 + (1.0 - sab) * R + np.sqrt(1.0 - sab * sab) * eps


def residual_coefficient(t, schedule: NoiseSchedule):
    a = schedule.alphas[np.asarray(t)]
    ab = schedule.alpha_bars[np.asarray(t)]
    return (1.0 - np.sqrt(a)) * np.sqrt(1.0 - ab) / schedule.betas[np.asarray(t)]


def res_noise_target(eps, R, t, schedule: NoiseSchedule) -> np.ndarray:
    """eps + ((1 - sqrt(a_t)) sqrt(1 - ab_t) / beta_t) R: what the denoiser regresses."""
    eps, R = np.asarray(eps, dtype=np.float64), np.asarray(R, dtype=np.float64)
    if eps.shape != R.shape:
        raise nn.ShapeError(f"res_noise_target: eps {eps.shape} vs R {R.shape}")
    c = residual_coefficient(t, schedule)
    c = c.reshape(np.shape(c) + (1,) * (eps.ndim - np.ndim(c))) if np.ndim(c) else c
    return eps + c * R


def reverse_mean(G_t, res_eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    b, a, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
    return (G_t - (b / math.sqrt(1.0 - ab)) * res_eps) / math.sqrt(a)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainingInstance:
    coords: np.ndarray  # (V, 2), unit square
    degraded: Tour
    label: Tour

    def __post_init__(self):
        V = len(self.coords)
        check_tour(self.degraded, V)
        check_tour(self.label, V)

    @property
    def V(self) -> int:
        return len(self.coords)


@dataclass
class TrainResult:
    params: nn.ParamStore
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _offdiag(V: int) -> np.ndarray:
    return 1.0 - np.eye(V)


def train(instances: Sequence[TrainingInstance], params: nn.ParamStore, schedule: NoiseSchedule,
          steps: int, config: gnn.GNNConfig, batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
          method: str = "adam", lr_schedule: str = "cosine", lr_final: float = 0.0,
          log_every: int = 0) -> TrainResult:
    """Regress the residual noise on random (instance, t, eps) draws; t ~ U{1..T'}.

    Updates ``params`` in place and returns it with the per-step loss trace.
    ``lr_schedule="cosine"`` anneals from ``lr`` to ``lr_final`` over ``steps``.
    """
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr schedule {lr_schedule!r}")
    if not instances:
        raise ValueError("no training instances")
    sizes = {inst.V for inst in instances}
    if len(sizes) != 1:
        raise ValueError(f"all instances in a run must share V, got {sorted(sizes)}")
    V = sizes.pop()
    coords = np.stack([np.asarray(i.coords, dtype=np.float64) for i in instances])
    G0 = np.stack([encode_tour(i.label, V) for i in instances])
    G_hat = np.stack([encode_tour(i.degraded, V) for i in instances])
    mask = _offdiag(V)
    rng = np.random.default_rng(seed)
    result = TrainResult(params)
    start = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(instances), size=batch_size)
        t = rng.integers(1, schedule.t_prime + 1, size=batch_size)
        eps = sym_noise(rng, (batch_size, V, V))
        g0, gh = G0[idx], G_hat[idx]
        G_t = forward_sample(g0, gh, t, eps, schedule)
        target = res_noise_target(eps, gh - g0, t, schedule)
        params.zero_grad()
        pred = gnn.forward(G_t, coords[idx], t, params.params, config)
        loss = nn.mse(pred, target, mask)
        value = loss.item()
        if not math.isfinite(value):
            raise nn.NonFiniteGradient(f"non-finite loss at training step {step}")
        loss.backward()
        step_lr = lr
        if lr_schedule == "cosine":
            step_lr = lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / steps))
        nn.optimizer_step(params, lr=step_lr, method=method)
        result.losses.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(np.mean(result.losses[-log_every:])))
    result.seconds = time.perf_counter() - start
    return result


def evaluate_loss(instances: Sequence[TrainingInstance], params, schedule: NoiseSchedule,
                  config: gnn.GNNConfig, draws: int = 64, seed: int = 0) -> float:
    """Mean regression loss over fresh (t, eps) draws, without updating anything."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for inst in instances:
        V = inst.V
        g0, gh = encode_tour(inst.label, V), encode_tour(inst.degraded, V)
        t = rng.integers(1, schedule.t_prime + 1, size=draws)
        eps = sym_noise(rng, (draws, V, V))
        G_t = forward_sample(np.broadcast_to(g0, eps.shape), np.broadcast_to(gh, eps.shape), t, eps, schedule)
        target = res_noise_target(eps, np.broadcast_to(gh - g0, eps.shape), t, schedule)
        pred = gnn.predict_res_noise(G_t, np.broadcast_to(inst.coords, (draws, V, 2)), t, params, config)
        diff = (pred - target) * _offdiag(V)
        total += float(np.sum(diff * diff) / (draws * V * (V - 1)))
    return total / len(instances)


# ----------------------------------------------------------------- sampling

Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SampleResult:
    heatmaps: np.ndarray  # (n_samples, V, V) in [0, 1]
    denoiser_calls: int
    start_step: int


def make_denoiser(params, config: gnn.GNNConfig, dtype=np.float32) -> Denoiser:
    """Bind frozen parameters into a (G_t, coords, t) -> res_eps callable."""
    frozen = nn.frozen(params, dtype)

    def call(G_t, coords, t):
        return gnn.predict_res_noise(G_t, coords, t, frozen, config).astype(np.float64)

    return call


def sample(G_hat, coords, schedule: NoiseSchedule, denoiser: Denoiser, seed: int = 0,
           mode: str = "prior", n_samples: int = 1) -> SampleResult:
    """Run the reverse chain for ``n_samples`` independent samples in one batch.

    ``G_hat`` is the degraded +/-1 heatmap. Sample ``k`` draws all of its
    noise from ``default_rng([seed, k])``, so results do not depend on the
    batch size.
    """
    G_hat = np.asarray(G_hat, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    V = G_hat.shape[0]
    if G_hat.shape != (V, V) or coords.shape != (V, 2):
        raise nn.ShapeError(f"sample: G_hat {G_hat.shape} and coords {coords.shape} disagree")
    if mode not in ("prior", "no_prior"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rngs = [np.random.default_rng([seed, k]) for k in range(n_samples)]

    def noise():
        return np.stack([sym_noise(r, (V, V)) for r in rngs])

    if mode == "prior":
        start = schedule.t_prime
        ab = schedule.alpha_bars[start]
        G = math.sqrt(ab) * np.broadcast_to(G_hat, (n_samples, V, V)) + math.sqrt(1.0 - ab) * noise()
    else:
        start = schedule.T
        G = noise()
    batch_coords = np.broadcast_to(coords, (n_samples, V, 2))
    calls = 0
    for t in range(start, 1, -1):
        res = denoiser(G, batch_coords, np.full(n_samples, t))
        calls += 1
        G = reverse_mean(G, res, t, schedule) + math.sqrt(schedule.beta_tildes[t]) * noise()
        if not np.all(np.isfinite(G)):
            raise NonFiniteState(f"non-finite heatmap at reverse step {t}")
    res = denoiser(G, batch_coords, np.ones(n_samples, dtype=np.int64))
    calls += 1
    out = np.clip(to_unit(reverse_mean(G, res, 1, schedule)), 0.0, 1.0)
    out[:, np.arange(V), np.arange(V)] = 0.0
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("non-finite heatmap at reverse step 1")
    return SampleResult(out, calls, start)


def save_heatmap_csv(path, H) -> None:
    np.savetxt(path, np.asarray(H), delimiter=",", fmt="%.6f")
