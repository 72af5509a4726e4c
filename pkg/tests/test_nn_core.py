import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustprop import nn_core as nn
from trustprop.nn_core import Tensor


def _param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_matmul_value_and_shape_error():
    out = nn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])
    with pytest.raises(nn.ShapeError, match=r"\(2, 2\).*\(3, 1\)"):
        nn.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 1))))


def test_relu_value_and_grad():
    x = _param([-2.0, 3.0])
    y = nn.relu(x)
    nn.sum(y).backward()
    assert np.array_equal(y.data, [0.0, 3.0])
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_sigmoid_grad_at_zero():
    x = _param([0.0])
    nn.sum(nn.sigmoid(x)).backward()
    assert x.grad[0] == pytest.approx(0.25)


def test_add_shape_error_reports_both_shapes():
    with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        nn.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


@pytest.mark.parametrize("op", ["add", "mul", "matmul", "relu", "sigmoid", "sum", "mse"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(0)
    p = {"a": _param(rng.normal(size=(3, 4))), "b": _param(rng.normal(size=(3, 4)))}
    w = _param(rng.normal(size=(4, 2)))
    target = rng.normal(size=(3, 4))

    def fn(q):
        a, b = q["a"], q["b"]
        out = {"add": lambda: nn.add(a, b), "mul": lambda: nn.mul(a, b),
               "matmul": lambda: nn.matmul(a, w), "relu": lambda: nn.relu(a),
               "sigmoid": lambda: nn.sigmoid(a), "sum": lambda: nn.sum(a, axis=1),
               "mse": lambda: nn.mse(a, target)}[op]()
        return nn.sum(nn.mul(out, out))

    assert nn.gradient_check(fn, p) < 1e-4


def test_batch_norm_statistics():
    x = np.random.default_rng(1).normal(5.0, 2.0, size=(500, 3))
    out = nn.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.allclose(out.mean(axis=0), 0, atol=1e-10)
    assert np.allclose(out.var(axis=0), 1, atol=1e-3)
    flat = nn.batch_norm(Tensor(x), Tensor(np.zeros(3)), Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(flat, [1.0, 2.0, 3.0])


def test_batch_norm_gradient_and_single_item():
    rng = np.random.default_rng(2)
    p = {"x": _param(rng.normal(size=(4, 3))), "g": _param(rng.normal(size=3)), "b": _param(rng.normal(size=3))}
    c = rng.normal(size=(4, 3))
    err = nn.gradient_check(lambda q: nn.sum(nn.mul(nn.batch_norm(q["x"], q["g"], q["b"]), c)), p)
    assert err < 1e-4
    with pytest.raises(nn.ShapeError):
        nn.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def _mlp_params(d, rng=None, zero=False, identity=False):
    if identity:
        return {"m.w1": Tensor(np.eye(d)), "m.b1": Tensor(np.zeros(d)),
                "m.w2": Tensor(np.eye(d)), "m.b2": Tensor(np.zeros(d))}
    if zero:
        return {"m.w1": Tensor(np.zeros((d, d))), "m.b1": Tensor(np.zeros(d)),
                "m.w2": Tensor(np.zeros((d, d))), "m.b2": Tensor(np.arange(d, dtype=float))}
    return {k: _param(rng.normal(size=s)) for k, s in
            [("m.w1", (d, d)), ("m.b1", (d,)), ("m.w2", (d, d)), ("m.b2", (d,))]}


def test_mlp2_examples():
    x = Tensor(np.random.default_rng(3).uniform(0.1, 1.0, size=(5, 4)))
    assert np.array_equal(nn.mlp2(x, _mlp_params(4, zero=True), "m").data, np.tile(np.arange(4.0), (5, 1)))
    assert np.allclose(nn.mlp2(x, _mlp_params(4, identity=True), "m").data, x.data)
    rng = np.random.default_rng(4)
    p = _mlp_params(8, rng)
    xin = rng.normal(size=(6, 8))
    assert nn.gradient_check(lambda q: nn.sum(nn.mul(nn.mlp2(Tensor(xin), q, "m"), 0.3)), p) < 1e-4


def test_sinusoidal_encode():
    enc = nn.sinusoidal_encode(0.0, 6)
    assert np.array_equal(enc, [0, 1, 0, 1, 0, 1])
    with pytest.raises(ValueError):
        nn.sinusoidal_encode(1.0, 5)


@given(st.floats(0, 1000), st.floats(0, 1000))
def test_sinusoidal_bounded_and_injective(a, b):
    ea, eb = nn.sinusoidal_encode(a, 64), nn.sinusoidal_encode(b, 64)
    assert np.all(np.abs(ea) <= 1)
    if abs(a - b) > 1e-3:
        assert np.linalg.norm(ea - eb) > 1e-6


def test_optimizer_examples():
    store = nn.ParamStore({"w": np.array([1.0])})
    nn.optimizer_step(store, {"w": np.zeros(1)}, lr=0.1)
    assert store["w"].data[0] == 1.0
    store = nn.ParamStore({"w": np.array([1.0])})
    nn.optimizer_step(store, {"w": np.ones(1)}, lr=0.1)
    assert store["w"].data[0] == pytest.approx(0.9, abs=1e-6)
    assert store.step == 1


def test_optimizer_converges_on_bowl():
    store = nn.ParamStore({"w": np.array([1.0])})
    for _ in range(200):
        nn.optimizer_step(store, {"w": 2 * store["w"].data}, lr=0.05)
    assert abs(store["w"].data[0]) < 1e-3


def test_optimizer_rejects_non_finite():
    store = nn.ParamStore({"w": np.array([1.0])})
    with pytest.raises(nn.NonFiniteGradient):
        nn.optimizer_step(store, {"w": np.array([np.nan])})


def test_sgd_variant():
    store = nn.ParamStore({"w": np.array([1.0])})
    nn.optimizer_step(store, {"w": np.array([2.0])}, lr=0.1, method="sgd")
    assert store["w"].data[0] == pytest.approx(0.8)


def test_gradient_check_linear_and_fault_injection():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    store = nn.ParamStore({"w": rng.normal(size=(3, 2))})

    def fn(q):
        return nn.sum(nn.matmul(Tensor(x), q["w"]))

    assert nn.gradient_check(fn, store) < 1e-9
    bad = {"w": np.ones((3, 2)) * 5.0}
    assert nn.gradient_check(fn, store, grads=bad) > 1e-2


def test_small_step_decreases_loss():
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 1))
    store = nn.ParamStore({"w": rng.normal(size=(3, 1)), "b": np.zeros(1)})

    def loss():
        return nn.mse(nn.linear(Tensor(x), store["w"], store["b"]), y)

    before = loss()
    before.backward()
    nn.optimizer_step(store, lr=1e-4)
    assert loss().item() < before.item()


def test_checkpoint_round_trip(tmp_path):
    store = nn.ParamStore({"a": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])})
    nn.save_checkpoint(tmp_path / "m.ckpt", store, {"layers": 1, "d": 3, "seed": 9})
    loaded, meta = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"version": 1, "layers": 1, "d": 3, "seed": 9}
    assert list(loaded.params) == ["a", "b"]
    assert np.array_equal(loaded["a"].data, store["a"].data)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    store = nn.ParamStore({"a": np.ones(2)})
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, store)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_no_grad_skips_graph():
    x = _param([1.0, 2.0])
    with nn.no_grad():
        y = nn.mul(x, 3.0)
    assert y._backward is None


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_unbroadcast_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    p = {"a": _param(rng.normal(size=(n, m))), "b": _param(rng.normal(size=(m,)))}
    assert nn.gradient_check(lambda q: nn.sum(nn.mul(nn.add(q["a"], q["b"]), q["b"])), p) < 1e-4
