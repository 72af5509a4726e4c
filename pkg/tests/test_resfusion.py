import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustprop import gated_gnn as gnn
from trustprop import resfusion as rf
from trustprop import solvers as sv

SCHED = rf.build_schedule()


def test_default_t_prime():
    assert SCHED.t_prime == 368
    assert abs(np.sqrt(SCHED.alpha_bars[368]) - 0.5) < abs(np.sqrt(SCHED.alpha_bars[367]) - np.sqrt(SCHED.alpha_bars[368]))


def test_t_prime_edge_cases():
    assert rf.build_schedule(1).t_prime == 1
    assert rf.build_schedule(100, 1e-6, 2e-6).t_prime == 100
    assert rf.compute_t_prime([0.81, 0.36, 0.16]) == 2
    assert rf.compute_t_prime([0.25]) == 1


def test_schedule_invariants():
    s = SCHED
    assert np.all(np.diff(s.betas[1:]) > 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(s.beta_tildes[1:] <= s.betas[1:])
    assert s.beta_tildes[1] == 0.0 and s.alpha_bars[0] == 1.0
    with pytest.raises(ValueError):
        rf.build_schedule(10, 0.02, 0.01)
    with pytest.raises(ValueError):
        rf.schedule_from_betas([0.1, 0.05])


def test_encode_tour():
    G = rf.encode_tour((0, 1, 2, 3))
    ones = {(0, 1), (1, 2), (2, 3), (0, 3)}
    for i in range(4):
        for j in range(4):
            want = 0 if i == j else (1 if (min(i, j), max(i, j)) in ones else -1)
            assert G[i, j] == want
    with pytest.raises(sv.InvalidTour):
        rf.encode_tour((0, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 15), st.integers(0, 10_000))
def test_encode_degree_and_decode_round_trip(V, seed):
    rng = np.random.default_rng(seed)
    tour = tuple(rng.permutation(V).tolist())
    G = rf.encode_tour(tour)
    assert np.all((G == 1).sum(axis=1) == (2 if V > 2 else 1))
    D = sv.distance_matrix(rng.uniform(size=(V, 2)))
    assert sv.canonical(sv.greedy_edge_tour(rf.to_unit(G))) == sv.canonical(tour)
    assert sv.check_tour(sv.decode_heatmap(rf.to_unit(G), D), V)


def test_sym_noise_shape():
    z = rf.sym_noise(np.random.default_rng(0), (3, 5, 5))
    assert np.array_equal(z, np.swapaxes(z, 1, 2))
    assert np.all(z[:, np.arange(5), np.arange(5)] == 0)


def _triplet(rng, V=6):
    G0 = rf.encode_tour(tuple(rng.permutation(V).tolist()))
    Gh = rf.encode_tour(tuple(rng.permutation(V).tolist()))
    return G0, Gh, rf.sym_noise(rng, (V, V))


def test_forward_sample_special_cases():
    rng = np.random.default_rng(1)
    G0, Gh, eps = _triplet(rng)
    t = 200
    ab = SCHED.alpha_bars[t]
    assert np.allclose(rf.forward_sample(G0, G0, t, eps, SCHED), np.sqrt(ab) * G0 + np.sqrt(1 - ab) * eps)
    assert np.allclose(rf.forward_sample(G0, Gh, t, 0 * eps, SCHED),
                       np.sqrt(ab) * G0 + (1 - np.sqrt(ab)) * (Gh - G0))
    with pytest.raises(ValueError):
        rf.forward_sample(G0, Gh, 0, eps, SCHED)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 1000))
def test_forward_equals_rewrite(seed, t):
    rng = np.random.default_rng(seed)
    G0, Gh, eps = rng.normal(size=(3, 5, 5))
    s = np.sqrt(SCHED.alpha_bars[t])
    rewrite = (2 * s - 1) * G0 + (1 - s) * Gh + np.sqrt(1 - s * s) * eps
    assert np.max(np.abs(rf.forward_sample(G0, Gh, t, eps, SCHED) - rewrite)) < 1e-12


def test_res_noise_target_cases():
    rng = np.random.default_rng(2)
    eps, R = rng.normal(size=(2, 4, 4))
    assert np.array_equal(rf.res_noise_target(eps, np.zeros_like(R), 17, SCHED), eps)
    assert rf.residual_coefficient(1, SCHED) == pytest.approx(0.005, rel=1e-3)
    assert np.allclose(rf.res_noise_target(np.zeros_like(R), R, 1, SCHED), rf.residual_coefficient(1, SCHED) * R)


def test_batched_coefficients_match_scalar():
    rng = np.random.default_rng(3)
    G0, Gh, eps = rng.normal(size=(3, 4, 5, 5))
    t = np.array([1, 50, 368, 1000])
    batched = rf.forward_sample(G0, Gh, t, eps, SCHED)
    target = rf.res_noise_target(eps, Gh - G0, t, SCHED)
    for k in range(4):
        assert np.allclose(batched[k], rf.forward_sample(G0[k], Gh[k], int(t[k]), eps[k], SCHED))
        assert np.allclose(target[k], rf.res_noise_target(eps[k], Gh[k] - G0[k], int(t[k]), SCHED))


def test_exact_target_inverts_first_step():
    rng = np.random.default_rng(4)
    G0, Gh, eps = _triplet(rng)
    G1 = rf.forward_sample(G0, G0, 1, 0 * eps, SCHED)
    assert np.allclose(rf.reverse_mean(G1, np.zeros_like(G0), 1, SCHED), G0)
    G1 = rf.forward_sample(G0, Gh, 1, eps, SCHED)
    target = rf.res_noise_target(eps, Gh - G0, 1, SCHED)
    assert np.allclose(rf.reverse_mean(G1, target, 1, SCHED), G0, atol=1e-12)


def _oracle(G0, Gh, eps_fixed=None):
    """Denoiser that knows the clean and degraded tours exactly."""
    def call(G_t, coords, t):
        out = []
        for g, step in zip(G_t, t):
            s = np.sqrt(SCHED.alpha_bars[step])
            eps = (g - (2 * s - 1) * G0 - (1 - s) * Gh) / np.sqrt(1 - s * s)
            out.append(rf.res_noise_target(eps, Gh - G0, int(step), SCHED))
        return np.stack(out)
    return call


def test_sampler_with_oracle_denoiser_recovers_label():
    rng = np.random.default_rng(5)
    coords = rng.uniform(size=(7, 2))
    G0, Gh, _ = _triplet(rng, 7)
    res = rf.sample(Gh, coords, SCHED, _oracle(G0, Gh), seed=3, n_samples=2)
    assert res.denoiser_calls == 368 and res.start_step == 368
    assert np.allclose(res.heatmaps, np.broadcast_to(rf.to_unit(G0) * (1 - np.eye(7)), res.heatmaps.shape), atol=1e-6)


def test_sampler_output_contract_and_call_counts():
    V = 5
    coords = np.random.default_rng(6).uniform(size=(V, 2))
    Gh = rf.encode_tour(tuple(range(V)))
    zero = lambda G, c, t: np.zeros_like(G)  # noqa: E731
    for mode, calls in (("prior", 368), ("no_prior", 1000)):
        res = rf.sample(Gh, coords, SCHED, zero, seed=1, mode=mode, n_samples=3)
        assert res.denoiser_calls == calls
        H = res.heatmaps
        assert H.shape == (3, V, V)
        assert np.all((H >= 0) & (H <= 1))
        assert np.allclose(H, np.swapaxes(H, 1, 2))
        assert np.all(H[:, np.arange(V), np.arange(V)] == 0)
    with pytest.raises(ValueError):
        rf.sample(Gh, coords, SCHED, zero, mode="ddim")


def test_sampler_seeds_independent_of_batch_size():
    coords = np.random.default_rng(7).uniform(size=(5, 2))
    Gh = rf.encode_tour(tuple(range(5)))
    zero = lambda G, c, t: np.zeros_like(G)  # noqa: E731
    small = rf.build_schedule(20)
    one = rf.sample(Gh, coords, small, zero, seed=9, n_samples=1).heatmaps
    three = rf.sample(Gh, coords, small, zero, seed=9, n_samples=3).heatmaps
    assert np.array_equal(one[0], three[0])


def test_sampler_non_finite_state():
    coords = np.random.default_rng(8).uniform(size=(4, 2))
    bad = lambda G, c, t: np.full_like(G, np.nan)  # noqa: E731
    with pytest.raises(rf.NonFiniteState, match="step"):
        rf.sample(rf.encode_tour((0, 1, 2, 3)), coords, rf.build_schedule(10), bad)


def _instance(V=6, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.uniform(size=(V, 2))
    D = sv.distance_matrix(c)
    return rf.TrainingInstance(c, sv.greedy_tour(D), sv.held_karp(D)[0])


def test_training_trace_deterministic_and_non_negative():
    cfg = gnn.GNNConfig(layers=2, width=8)
    inst = [_instance(6, 1), _instance(6, 2)]
    runs = []
    for _ in range(2):
        params = gnn.init_params(cfg, 0)
        runs.append(rf.train(inst, params, SCHED, 15, cfg, batch_size=4, seed=3).losses)
    assert runs[0] == runs[1]
    assert all(v >= 0 for v in runs[0])


def test_training_rejects_mixed_sizes():
    cfg = gnn.GNNConfig(layers=1, width=8)
    with pytest.raises(ValueError):
        rf.train([_instance(5), _instance(6)], gnn.init_params(cfg, 0), SCHED, 1, cfg)
    with pytest.raises(sv.InvalidTour):
        rf.TrainingInstance(np.zeros((3, 2)), (0, 1, 2), (0, 1))


def test_training_reduces_loss():
    cfg = gnn.GNNConfig(layers=2, width=16)
    inst = [_instance(8, 3)]
    params = gnn.init_params(cfg, 1)
    before = rf.evaluate_loss(inst, params.params, SCHED, cfg, draws=32)
    rf.train(inst, params, SCHED, 60, cfg, batch_size=8, lr=3e-3, seed=0)
    assert rf.evaluate_loss(inst, params.params, SCHED, cfg, draws=32) < before


def test_heatmap_csv(tmp_path):
    H = rf.to_unit(rf.encode_tour((0, 2, 1, 3)))
    rf.save_heatmap_csv(tmp_path / "h.csv", H)
    assert np.allclose(np.loadtxt(tmp_path / "h.csv", delimiter=","), H)
