"""Tour construction, local search, exact DP, GA, and heatmap decoding.

A tour is a tuple of node indices describing a closed cycle; the leg from
the last entry back to the first is implied. Distance matrices are dense,
symmetric, and zero on the diagonal (meters, unit-square lengths, or
per-leg propagation times all work).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tour = tuple[int, ...]

HELD_KARP_MAX = 18


class InvalidTour(ValueError):
    pass


def check_tour(tour, n: int | None = None) -> Tour:
    tour = tuple(int(i) for i in tour)
    n = len(tour) if n is None else n
    if len(tour) < 2 or sorted(tour) != list(range(n)):
        raise InvalidTour(f"not a permutation of 0..{n - 1}: {tour}")
    return tour


def check_distances(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0) or np.any(D < 0):
        raise ValueError("distance matrix must be symmetric, non-negative, zero-diagonal")
    return D


def distance_matrix(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def tour_length(tour, D) -> float:
    t = np.asarray(tour)
    return float(np.sum(np.asarray(D)[t, np.roll(t, -1)]))


def canonical(tour) -> Tour:
    """Rotate to start at node 0 and pick the direction with the smaller second entry."""
    t = list(tour)
    k = t.index(min(t))
    t = t[k:] + t[:k]
    rev = [t[0]] + t[1:][::-1]
    return tuple(min(t, rev))


def tour_edges(tour) -> set[frozenset]:
    t = list(tour)
    return {frozenset((a, b)) for a, b in zip(t, t[1:] + t[:1])}


# ------------------------------------------------------------------ greedy

def greedy_tour(D, start: int = 0) -> Tour:
    """Nearest unvisited neighbor from ``start``; ties go to the lowest index."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes")
    visited = np.zeros(n, dtype=bool)
    tour = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, D[tour[-1]])
        nxt = int(np.argmin(row))  # argmin returns the first (lowest) index on ties
        tour.append(nxt)
        visited[nxt] = True
    return tuple(tour)


# ------------------------------------------------------------------- 2-opt

def two_opt(tour, D, best_improvement: bool = False, tol: float = 1e-12) -> Tour:
    """Segment-reversal local search until no reversal shortens the cycle.

    First-improvement scans ``i`` ascending and, for each ``i``, takes the
    lowest ``j`` that improves; best-improvement applies the single best move
    of a full pass.
    """
    D = np.asarray(D, dtype=np.float64)
    t = np.array(tour, dtype=np.int64)
    n = len(t)
    if n < 4:
        return tuple(int(x) for x in t)
    improved = True
    while improved:
        improved = False
        best = (-tol, None, None)
        for i in range(n - 2):
            j = np.arange(i + 2, n if i > 0 else n - 1)
            if j.size == 0:
                continue
            a, b = t[i], t[i + 1]
            c, d = t[j], t[(j + 1) % n]
            delta = D[a, c] + D[b, d] - D[a, b] - D[c, d]
            if best_improvement:
                k = int(np.argmin(delta))
                if delta[k] < best[0]:
                    best = (delta[k], i, int(j[k]))
                continue
            hits = np.flatnonzero(delta < -tol)
            if hits.size:
                jj = int(j[hits[0]])
                t[i + 1:jj + 1] = t[i + 1:jj + 1][::-1]
                improved = True
        if best_improvement and best[1] is not None:
            i, jj = best[1], best[2]
            t[i + 1:jj + 1] = t[i + 1:jj + 1][::-1]
            improved = True
    return tuple(int(x) for x in t)


# -------------------------------------------------------------- Held-Karp

def held_karp(D) -> tuple[Tour, float]:
    """Exact optimal cycle by subset DP; node 0 is the fixed start."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if n > HELD_KARP_MAX:
        raise ValueError(f"Held-Karp is capped at {HELD_KARP_MAX} nodes, got {n}")
    if n <= 3:
        tour = tuple(range(n))
        return tour, tour_length(tour, D)
    m = n - 1  # nodes 1..n-1 are subset members 0..m-1
    inner = D[1:, 1:]
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = D[0, j + 1]
    bits = np.arange(m)
    for mask in range(1, full):
        members = bits[(mask >> bits) & 1 == 1]
        if members.size < 2:
            continue
        prev = mask ^ (1 << members)
        cand = dp[prev] + inner[:, members].T  # (len(members), m): prev end k -> j
        k = np.argmin(cand, axis=1)
        dp[mask, members] = cand[np.arange(members.size), k]
        parent[mask, members] = k
    closing = dp[full - 1] + D[1:, 0]
    j = int(np.argmin(closing))
    cost = float(closing[j])
    path, mask = [], full - 1
    while j >= 0:
        path.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    return (0, *reversed(path)), cost


# --------------------------------------------------------------------- GA

@dataclass(frozen=True)
class GAConfig:
    population: int = 100
    generations: int = 500
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    tournament_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if self.tournament_k < 1:
            raise ValueError("tournament_k must be >= 1")


def order_crossover(p1, p2, a: int, b: int) -> list[int]:
    """OX: keep ``p1[a:b]``, fill the rest in ``p2`` order starting after ``b``."""
    n = len(p1)
    child = [-1] * n
    child[a:b] = p1[a:b]
    kept = set(p1[a:b])
    fill = [g for g in (p2[(b + k) % n] for k in range(n)) if g not in kept]
    for k, g in zip([(b + k) % n for k in range(n - (b - a))], fill):
        child[k] = g
    return child


def ga_solve(D, cfg: GAConfig = GAConfig(), history: list | None = None) -> Tour:
    """Permutation GA: tournament selection, OX, swap mutation, elitism of one.

    ``history`` (if given) receives the best cost after each generation.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    rng = np.random.default_rng(cfg.seed)
    pop = np.array([rng.permutation(n) for _ in range(cfg.population)])

    def costs(p):
        return D[p, np.roll(p, -1, axis=1)].sum(axis=1)

    fit = costs(pop)
    best_i = int(np.argmin(fit))
    best, best_cost = pop[best_i].copy(), fit[best_i]
    for _ in range(cfg.generations):
        nxt = [best.copy()]
        while len(nxt) < cfg.population:
            picks = rng.integers(0, cfg.population, size=(2, cfg.tournament_k))
            p1 = pop[picks[0][np.argmin(fit[picks[0]])]]
            p2 = pop[picks[1][np.argmin(fit[picks[1]])]]
            if n > 2 and rng.random() < cfg.crossover_rate:
                a, b = sorted(rng.choice(n + 1, size=2, replace=False))
                child = np.array(order_crossover(p1.tolist(), p2.tolist(), int(a), int(b)))
            else:
                child = p1.copy()
            if rng.random() < cfg.mutation_rate:
                i, j = rng.choice(n, size=2, replace=False)
                child[[i, j]] = child[[j, i]]
            nxt.append(child)
        pop = np.array(nxt)
        fit = costs(pop)
        i = int(np.argmin(fit))
        if fit[i] < best_cost:
            best, best_cost = pop[i].copy(), fit[i]
        if history is not None:
            history.append(float(best_cost))
    return tuple(int(x) for x in best)


# ---------------------------------------------------------------- heatmaps

def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def greedy_edge_tour(H) -> Tour:
    """Insert edges by descending score under degree-2 / no-subcycle rules."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes")
    iu, ju = np.triu_indices(n, k=1)  # row-major, so stable sort breaks ties by (i, j)
    order = np.argsort(-H[iu, ju], kind="stable")
    degree = np.zeros(n, dtype=int)
    parent = list(range(n))
    adj = [[] for _ in range(n)]
    added = 0
    for e in order:
        if added == n - 1:
            break
        i, j = int(iu[e]), int(ju[e])
        if degree[i] >= 2 or degree[j] >= 2:
            continue
        ri, rj = _find(parent, i), _find(parent, j)
        if ri == rj:
            continue
        parent[ri] = rj
        degree[i] += 1
        degree[j] += 1
        adj[i].append(j)
        adj[j].append(i)
        added += 1
    # walk the Hamiltonian path from its lower endpoint; the closing leg is implied
    start = int(np.flatnonzero(degree < 2)[0])
    tour, prev = [start], -1
    while len(tour) < n:
        cur = tour[-1]
        nxt = next(k for k in adj[cur] if k != prev)
        prev = cur
        tour.append(nxt)
    return tuple(tour)


def decode_heatmap(H, D, best_improvement: bool = False) -> Tour:
    """Greedy edge construction from ``H`` followed by 2-opt on ``D``."""
    return two_opt(greedy_edge_tour(H), D, best_improvement=best_improvement)


def feasibility_raw(H, tau: float = 0.5) -> bool:
    """True iff the edges scoring above ``tau`` form one Hamiltonian cycle."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    adj = (H > tau) & ~np.eye(n, dtype=bool)
    adj = adj & adj.T
    if n == 2:
        return bool(adj[0, 1])
    if np.any(adj.sum(axis=1) != 2):
        return False
    prev, cur, steps = -1, 0, 0
    while True:
        a, b = np.flatnonzero(adj[cur])
        nxt = a if a != prev else b
        prev, cur = cur, int(nxt)
        steps += 1
        if cur == 0:
            return steps == n
