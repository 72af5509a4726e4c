"""Anisotropic gated graph network that predicts the residual-noise matrix.

Shapes inside the network carry a leading batch axis ``B``:
node embeddings ``(B, V, d)``, edge embeddings ``(B, V, V, d)``.
Batch norm statistics are taken per graph, so a sample's output never
depends on what else is in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import nn_core as nn
from .nn_core import Tensor


@dataclass(frozen=True)
class GNNConfig:
    layers: int = 4
    width: int = 64
    coord_scale: float = 100.0  # coordinates arrive in the unit square
    neighbors: int | None = None  # k-NN sparsification; None = dense

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.width <= 0 or self.width % 2:
            raise ValueError("width must be even (sinusoidal encoding)")


@dataclass
class GraphEmbeddings:
    nodes: Tensor  # (B, V, d)
    edges: Tensor  # (B, V, V, d)
    timestep: Tensor  # (B, d)


class NonFiniteActivation(FloatingPointError):
    pass


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def _mlp_params(store, rng, prefix, d):
    store.add(f"{prefix}.w1", _glorot(rng, d, d))
    store.add(f"{prefix}.b1", np.zeros(d))
    store.add(f"{prefix}.w2", _glorot(rng, d, d))
    store.add(f"{prefix}.b2", np.zeros(d))


def init_params(config: GNNConfig, seed: int = 0) -> nn.ParamStore:
    rng = np.random.default_rng(seed)
    d = config.width
    store = nn.ParamStore()
    store.add("node_embed.w", _glorot(rng, d, d))
    store.add("node_embed.b", np.zeros(d))
    store.add("edge_embed.w", rng.normal(0.0, 1.0, size=(1, d)))
    store.add("edge_embed.b", np.zeros(d))
    for r in range(config.layers):
        for name in ("H", "P", "Z", "A", "R"):
            store.add(f"layer{r}.{name}", _glorot(rng, d, d))
        store.add(f"layer{r}.bn_e.gamma", np.ones(d))
        store.add(f"layer{r}.bn_e.beta", np.zeros(d))
        store.add(f"layer{r}.bn_v.gamma", np.ones(d))
        store.add(f"layer{r}.bn_v.beta", np.zeros(d))
        _mlp_params(store, rng, f"layer{r}.mlp_e", d)
        _mlp_params(store, rng, f"layer{r}.mlp_t", d)
    store.add("head.w", _glorot(rng, d, 1) * 0.1)
    store.add("head.b", np.zeros(1))
    return store


def _batched(G, coords, t):
    G = np.asarray(G, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    single = G.ndim == 2
    if single:
        G, coords = G[None], coords[None]
    if G.ndim != 3 or G.shape[1] != G.shape[2]:
        raise nn.ShapeError(f"heatmap must be (V, V) or (B, V, V), got {G.shape}")
    if coords.shape != G.shape[:2] + (2,):
        raise nn.ShapeError(f"coords {coords.shape} do not match heatmap {G.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (G.shape[0],))
    return G, coords, t, single


def _dtype(params):
    return params["head.w"].data.dtype


def embed_inputs(G, coords, t, params: Mapping[str, Tensor], config: GNNConfig) -> GraphEmbeddings:
    """Lift coordinates, heatmap entries, and the step index to width ``d``."""
    G, coords, t, _ = _batched(G, coords, t)
    d = config.width
    dt = _dtype(params)
    scaled = coords * config.coord_scale
    enc = np.concatenate([nn.sinusoidal_encode(scaled[..., 0], d // 2),
                          nn.sinusoidal_encode(scaled[..., 1], d // 2)], axis=-1)
    nodes = nn.linear(enc.astype(dt), params["node_embed.w"], params["node_embed.b"])
    edges = nn.linear(G[..., None].astype(dt), params["edge_embed.w"], params["edge_embed.b"])
    temb = Tensor(nn.sinusoidal_encode(t, d).astype(dt))
    return GraphEmbeddings(nodes, edges, temb)


def neighbor_mask(coords: np.ndarray, k: int | None) -> np.ndarray:
    """(B, V, V, 1) mask of aggregated neighbors; self-loops excluded."""
    B, V, _ = coords.shape
    mask = np.broadcast_to(1.0 - np.eye(V), (B, V, V)).copy()
    if k is not None and k < V - 1:
        dist = np.linalg.norm(coords[:, :, None, :] - coords[:, None, :, :], axis=-1)
        dist[:, np.arange(V), np.arange(V)] = np.inf
        nearest = np.argsort(dist, axis=-1, kind="stable")[..., :k]
        knn = np.zeros((B, V, V))
        np.put_along_axis(knn, nearest, 1.0, axis=-1)
        mask = np.maximum(knn, np.swapaxes(knn, 1, 2))
    return mask[..., None]


def edge_update(r: int, emb: GraphEmbeddings, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return (new edge embeddings, gate pre-activations)."""
    B, V, d = emb.nodes.shape
    p = lambda name: params[f"layer{r}.{name}"]  # noqa: E731
    src = nn.reshape(nn.matmul(emb.nodes, p("P")), (B, V, 1, d))
    dst = nn.reshape(nn.matmul(emb.nodes, p("Z")), (B, 1, V, d))
    gates = nn.matmul(emb.edges, p("H")) + src + dst
    normed = nn.batch_norm(gates, p("bn_e.gamma"), p("bn_e.beta"), axes=(1, 2))
    t_shift = nn.reshape(nn.mlp2(emb.timestep, params, f"layer{r}.mlp_t"), (B, 1, 1, d))
    edges = emb.edges + nn.mlp2(normed, params, f"layer{r}.mlp_e") + t_shift
    return edges, gates


def node_update(r: int, emb: GraphEmbeddings, gates: Tensor, params: Mapping[str, Tensor],
                mask: np.ndarray) -> Tensor:
    B, V, d = emb.nodes.shape
    p = lambda name: params[f"layer{r}.{name}"]  # noqa: E731
    messages = nn.reshape(nn.matmul(emb.nodes, p("R")), (B, 1, V, d))
    agg = nn.sum(nn.mul(nn.sigmoid(gates), messages) * mask, axis=2)
    pre = nn.matmul(emb.nodes, p("A")) + agg
    return emb.nodes + nn.relu(nn.batch_norm(pre, p("bn_v.gamma"), p("bn_v.beta"), axes=1))


def forward(G, coords, t, params: Mapping[str, Tensor], config: GNNConfig) -> Tensor:
    """Differentiable forward pass; returns a (B, V, V) tensor."""
    G, coords, t, _ = _batched(G, coords, t)
    B, V, _ = G.shape
    emb = embed_inputs(G, coords, t, params, config)
    mask = neighbor_mask(coords, config.neighbors).astype(_dtype(params))
    for r in range(config.layers):
        edges, gates = edge_update(r, emb, params)
        nodes = node_update(r, emb, gates, params, mask)
        emb = GraphEmbeddings(nodes, edges, emb.timestep)
        if not (np.all(np.isfinite(edges.data)) and np.all(np.isfinite(nodes.data))):
            raise NonFiniteActivation(f"non-finite activations after layer {r}")
    out = nn.reshape(nn.linear(emb.edges, params["head.w"], params["head.b"]), (B, V, V))
    sym = nn.mul(out + nn.swapaxes(out, 1, 2), 0.5)
    return nn.mul(sym, (1.0 - np.eye(V)).astype(_dtype(params)))


def predict_res_noise(G, coords, t, params: Mapping[str, Tensor], config: GNNConfig) -> np.ndarray:
    """Inference wrapper: numpy in, numpy out, same batch layout as the input."""
    single = np.ndim(G) == 2
    with nn.no_grad():
        out = forward(G, coords, t, params, config).data
    return out[0] if single else out
