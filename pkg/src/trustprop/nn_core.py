"""Small dense-tensor engine with reverse-mode autodiff.

Only the handful of primitives the GatedGNN denoiser needs are provided.
Tensors wrap float64 numpy arrays; every op records a closure that pushes
gradients back to its inputs, and ``Tensor.backward`` replays them in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        # float32 is kept as-is for frozen inference; everything else is float64
        self.data = data if data.dtype == np.float32 else data.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if _is_scalar(other) else neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward) -> Tensor:
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents or not _grad_enabled.get():
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: a._accumulate(g))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    if _is_scalar(b):
        # python scalars stay weakly typed so float32 inference is not promoted
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: a._accumulate(g * b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


hadamard = mul


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is usually a 2-D weight applied to the last axis of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: a._accumulate(g * (a.data > 0)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 + 0.5 * np.tanh(0.5 * a.data)  # overflow-free and faster than expit
    return _make(s, (a,), lambda g: a._accumulate(g * s * (1.0 - s)))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: a._accumulate(np.swapaxes(g, ax1, ax2)))


def mse(pred, target, mask=None) -> Tensor:
    """Mean squared error; with ``mask`` the mean runs over masked-in entries only."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        w = np.full(diff.shape, 1.0 / diff.size)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
        w = mask / mask.sum()
    out = np.sum(w * diff * diff)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * w * diff)
        if target.requires_grad:
            target._accumulate(-g * 2.0 * w * diff)

    return _make(out, (pred, target), backward)


BN_EPS = 1e-5


def batch_norm(x, gamma, beta, axes=0) -> Tensor:
    """Standardize each feature over ``axes`` (the item axes) with batch statistics.

    ``gamma``/``beta`` have the feature shape (last axis). Statistics are always
    the current ones; there are no running averages.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(np.atleast_1d(axes).tolist())
    n = int(np.prod([x.shape[ax] for ax in axes]))
    if n < 2:
        raise ShapeError(f"batch_norm needs at least 2 items, got shape {x.shape} over axes {axes}")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs features {x.shape[-1:]}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            s1 = gh.sum(axis=axes, keepdims=True)
            s2 = (gh * xhat).sum(axis=axes, keepdims=True)
            x._accumulate(inv * (gh - s1 / n - xhat * s2 / n))

    return _make(out, (x, gamma, beta), backward)


# ------------------------------------------------------------- small layers

def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mlp2(x, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """linear -> ReLU -> linear using ``{prefix}.w1/b1/w2/b2``."""
    h = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def sinusoidal_encode(v, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs of ``v / 10000**(2k/dim)``; output shape ``v.shape + (dim,)``."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even positive dim, got {dim}")
    v = np.asarray(v, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ------------------------------------------------------- parameters & optim

class ParamStore:
    """Named parameters plus adaptive-moment optimizer state."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}

    def size(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore({k: p.data.copy() for k, p in self.params.items()})
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        out.step = self.step
        return out


class NonFiniteGradient(FloatingPointError):
    pass


def optimizer_step(store: ParamStore, grads: Mapping[str, np.ndarray] | None = None, lr: float = 1e-3,
                   method: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One in-place update of every parameter; returns ``store``."""
    if grads is None:
        grads = store.grads()
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient at step {store.step} in {bad}")
    store.step += 1
    if method == "sgd":
        for k, g in grads.items():
            store.params[k].data -= lr * g
        return store
    if method != "adam":
        raise ValueError(f"unknown optimizer {method!r}")
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for k, g in grads.items():
        m, v = store.m[k], store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def gradient_check(fn: Callable[[Mapping[str, Tensor]], Tensor], params: ParamStore | Mapping[str, Tensor],
                   step: float = 1e-5, grads: Mapping[str, np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the parameter mapping to a scalar tensor; inputs are closed over.
    ``grads`` overrides the analytic gradients (used to probe the checker itself).
    """
    named = dict(params.items())
    for p in named.values():
        p.grad = None
    if grads is None:
        fn(named).backward()
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in named.items()}
    worst = 0.0
    with no_grad():
        for k, p in named.items():
            flat = p.data.reshape(-1)
            g = np.asarray(grads[k]).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = fn(named).item()
                flat[i] = orig - step
                fm = fn(named).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------- checkpoint

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, meta: Mapping | None = None) -> None:
    """JSON manifest line, then a little-endian float32 blob in manifest order."""
    manifest = {"version": CHECKPOINT_VERSION, **(meta or {}),
                "params": [{"name": k, "shape": list(p.shape)} for k, p in store.items()]}
    blob = b"".join(p.data.astype("<f4").tobytes() for p in store.params.values())
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    manifest = json.loads(head.decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    store = ParamStore()
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = math.prod(shape)
        chunk = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        store.add(entry["name"], chunk.astype(np.float64).reshape(shape))
        offset += 4 * n
    if offset != len(blob):
        raise ValueError(f"checkpoint blob has {len(blob) - offset} trailing bytes")
    meta = {k: v for k, v in manifest.items() if k != "params"}
    return store, meta


def frozen(store: ParamStore | Mapping[str, Tensor], dtype=np.float32) -> dict[str, Tensor]:
    """Gradient-free copy of the parameters in ``dtype`` for fast inference."""
    return {k: Tensor(np.asarray(p.data, dtype=dtype)) for k, p in store.items()}


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
