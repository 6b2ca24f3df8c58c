import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgefed import gon
from edgefed.autodiff import ContractError
from edgefed.federation import build_config, from_groups, topology_graph
from edgefed.gon import GenerationConfig, GonConfig, GonNetwork, Sample, TrainConfig


def lei_graph(spec, lei, n, k, rng):
    return topology_graph(spec, rng.uniform(size=(spec.H, n * k)), lei)


def small_net(n=5, k=10, m_max=4, hidden=32, tau=1.0, seed=0):
    return GonNetwork(GonConfig(n=n, k=k, m_max=m_max, hidden=hidden, tau=tau, seed=seed))


def schedule(p, m, rng):
    S = np.zeros((p, m))
    S[np.arange(p), rng.integers(m, size=p)] = 1.0
    return S


def test_forward_shape_config2_scale(rng):
    spec = build_config(2)
    net = small_net()
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(7, 5, 10))
    R = gon.forward(net, G, W, schedule(3, 4, rng))
    assert R.shape == (7, 5, 10)
    assert np.all((R > 0) & (R < 1))


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(0, 5), st.integers(1, 3), st.integers(1, 6), st.integers(0, 99))
def test_shape_covariance(m, p, n, k, seed):
    r = np.random.default_rng(seed)
    spec = from_groups([m, 2], [[4096] * m, [4096] * 2])
    net = small_net(n=n, k=k, m_max=4, hidden=8, seed=seed)
    G = lei_graph(spec, 0, n, k, r)
    W = r.uniform(size=(m + p, n, k))
    R = gon.forward(net, G, W, schedule(p, m, r))
    assert R.shape == W.shape
    s = gon.score(net, G, W, schedule(p, m, r))
    assert 0 < s <= 1


def test_shape_mismatch_rejected(rng):
    spec = build_config(2)
    net = small_net()
    G = lei_graph(spec, 0, 5, 10, rng)
    with pytest.raises(ContractError):
        gon.forward(net, G, rng.uniform(size=(7, 5, 9)), schedule(3, 4, rng))
    with pytest.raises(ContractError):
        gon.forward(net, G, rng.uniform(size=(7, 5, 10)), schedule(2, 4, rng))


def test_cross_lei_jacobian_nonzero(rng):
    spec = build_config(2)
    net = small_net(hidden=16)
    feats = rng.uniform(size=(spec.H, 50))
    W = rng.uniform(size=(4, 5, 10))
    S = np.zeros((0, 4))
    G0 = topology_graph(spec, feats, 0)
    base = gon.forward(net, G0, W, S)
    f2 = feats.copy()
    f2[9] += 0.5  # a worker of LEI 2, reached through brokers
    moved = gon.forward(net, G0.with_features(f2), W, S)
    assert np.max(np.abs(moved - base)) > 1e-8


def test_score_closed_forms():
    assert gon.score_from_mse(0.0) == 1.0
    assert gon.score_from_mse(0.5, tau=0.5) == pytest.approx(np.exp(-1))
    a, b = gon.score_from_mse(0.01), gon.score_from_mse(0.04)
    assert a == pytest.approx(0.990, abs=1e-3) and b == pytest.approx(0.961, abs=1e-3) and a > b


def test_task_permutation_consistency(rng):
    spec = build_config(2)
    net = small_net(hidden=16)
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(4 + 3, 5, 10))
    S = schedule(3, 4, rng)
    perm = np.array([2, 0, 1])
    R = gon.forward(net, G, W, S)
    Wp = np.concatenate([W[:4], W[4:][perm]])
    Rp = gon.forward(net, G, Wp, S[perm])
    np.testing.assert_allclose(Rp[4:], R[4:][perm], atol=1e-12)
    np.testing.assert_allclose(Rp[:4], R[:4], atol=1e-12)


def test_generate_zero_iters_is_identity(rng):
    spec = build_config(2)
    net = small_net()
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(4, 5, 10))
    out = gon.generate(net, G, W, np.zeros((0, 4)), GenerationConfig(max_iters=0))
    np.testing.assert_array_equal(out, W)


def test_generation_best_score_monotone(rng):
    spec = build_config(2)
    net = small_net(hidden=16)
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(5, 5, 10))
    S = schedule(1, 4, rng)
    res = gon.generate(net, G, W, S, GenerationConfig(gamma=0.05, max_iters=15, convergence_eps=0.0), rng,
                       return_info=True)
    traj = np.array([np.atleast_1d(t)[0] for t in res.trajectory])
    assert np.all(np.diff(traj) >= 0)
    assert gon.log_score(net, G, res.window, S) >= gon.log_score(net, G, W, S) - 1e-5
    assert np.all((res.window >= 0) & (res.window <= 1))


def test_generation_moves_toward_training_data(rng):
    spec = from_groups([2, 2], [[4096] * 2, [4096] * 2])
    n, k = 2, 3
    net = small_net(n=n, k=k, m_max=2, hidden=16, tau=0.05, seed=1)
    Wbar = np.full((2, n, k), 0.3)
    G = topology_graph(spec, np.full((4, n * k), 0.3), 0)
    S = np.zeros((0, 2))
    tc = TrainConfig(lr=3e-3, weight_decay=0.0, m_batch=8, generation=GenerationConfig(max_iters=3))
    batch = [Sample(G, Wbar, S)] * 8
    r = np.random.default_rng(0)
    for _ in range(300):
        gon.train_minibatch(net, batch, 8, r, tc)
    Z0 = np.clip(Wbar + r.normal(0, 0.1, size=Wbar.shape), 0, 1)
    Zs = gon.generate(net, G, Z0, S, GenerationConfig(gamma=0.02, max_iters=60, convergence_eps=0.0), r)
    assert np.linalg.norm(Zs - Wbar) < np.linalg.norm(Z0 - Wbar)


def _stationary(r, n=2, k=3, count=64):
    spec = from_groups([2, 2], [[4096] * 2, [4096] * 2])
    S = np.zeros((0, 2))
    out = []
    for _ in range(count):
        W = np.clip(0.3 + 0.05 * r.normal(size=(2, n, k)), 0, 1)
        feats = np.clip(0.3 + 0.05 * r.normal(size=(4, n * k)), 0, 1)
        out.append(Sample(topology_graph(spec, feats, 0), W, S))
    return out


def test_train_step_lowers_gan_loss():
    r = np.random.default_rng(0)
    data = _stationary(r)
    net = small_net(n=2, k=3, m_max=2, hidden=16, seed=1)
    gcfg = GenerationConfig(gamma=0.1, max_iters=5)
    s = data[0]
    Zf = gon.generate(net, s.graph, s.window, s.schedule, gcfg, r)
    before = gon.train_step(net, s.graph, s.window, s.schedule, Zf, TrainConfig(lr=1e-3, weight_decay=0.0))
    assert gon.loss_value(net, s.graph, s.window, Zf, s.schedule) < before


@pytest.mark.xfail(strict=True, reason="a fresh ascent from W never scores below W, and indistinguishable "
                                       "fakes hold real scores near the 0.5 balance point")
def test_stationary_training_real_high_fake_below_real():
    r = np.random.default_rng(0)
    data = _stationary(r)
    net = small_net(n=2, k=3, m_max=2, hidden=16, seed=1)
    tc = TrainConfig(lr=3e-3, weight_decay=0.0, m_batch=8, generation=GenerationConfig(gamma=0.05, max_iters=5))
    for _ in range(200):
        gon.train_minibatch(net, data, 8, r, tc)
    real = np.mean([gon.score(net, s.graph, s.window, s.schedule) for s in data[:16]])
    fake = np.mean([gon.score(net, s.graph, gon.generate(net, s.graph, s.window, s.schedule, tc.generation, r),
                              s.schedule) for s in data[:16]])
    assert real >= 0.9 and fake < real


def test_single_sample_loss_bound(rng):
    spec = build_config(2)
    net = small_net(hidden=16)
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(4, 5, 10))
    S = np.zeros((0, 4))
    loss = gon.loss_value(net, G, W, W, S)
    assert loss >= 2 * np.log(2) - 1e-9


def test_train_minibatch_empty_rejected():
    with pytest.raises(ContractError):
        gon.train_minibatch(small_net(), [], 1)


def test_finetune_finite_and_deterministic(rng):
    spec = build_config(2)
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(6, 5, 10))
    S = schedule(2, 4, rng)
    a, b = small_net(hidden=16), small_net(hidden=16)
    la = gon.finetune(a, G, W, W, S)
    lb = gon.finetune(b, G, W, W, S)
    assert np.isfinite(la) and la == lb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_finetune_on_drift_lowers_fault_score():
    from edgefed.detection import fault_score

    r = np.random.default_rng(0)
    spec = build_config(2)

    def windows(level, count):
        base = level + 0.05 * r.normal(size=(count, 4, 5, 1))
        return np.clip(base + 0.02 * r.normal(size=(count, 4, 5, 6)), 0, 1)

    net = GonNetwork(GonConfig(n=5, k=6, m_max=4, hidden=32, tau=0.05, seed=0))
    G = topology_graph(spec, r.uniform(size=(spec.H, 30)), 0)
    S = np.zeros((0, 4))
    tc = TrainConfig(lr=1e-3)
    gc = GenerationConfig(gamma=1e-3, max_iters=5, convergence_eps=0.0)
    A = windows(0.3, 200)
    for _ in range(5):
        for i in range(0, 200, 10):
            W = A[i : i + 10]
            gon.train_step(net, G, W, S, gon.generate(net, G, W, S, gc, r), tc)
    B = windows(0.6, 300)  # the level drifts upward

    def mean_score(model):
        return np.mean([fault_score(B[j + 1], gon.generate(model, G, B[j], S, gc, np.random.default_rng(j)))[0]
                        for j in range(200, 299)])

    tuned = net.copy()
    for j in range(100):
        gon.finetune(tuned, G, B[j + 1], gon.generate(tuned, G, B[j], S, gc, r), S, tc)
    assert mean_score(tuned) < mean_score(net)


def test_parameter_economy():
    cfg = GonConfig(n=5, k=10, m_max=4)
    assert gon.count_params(cfg) <= 0.55 * gon.two_network_param_count(cfg)
    assert GonNetwork(cfg).num_params == gon.count_params(cfg)


def test_checkpoint_round_trip(tmp_path, rng):
    spec = build_config(2)
    net = small_net(hidden=16)
    G = lei_graph(spec, 0, 5, 10, rng)
    W = rng.uniform(size=(5, 5, 10))
    S = schedule(1, 4, rng)
    gon.finetune(net, G, W, W * 0.9, S)
    path = tmp_path / "m.npz"
    gon.save_checkpoint(net, path, {"note": np.arange(3)})
    back, extra = gon.load_checkpoint(path, expect={"n": 5, "k": 10})
    np.testing.assert_array_equal(gon.forward(back, G, W, S), gon.forward(net, G, W, S))
    np.testing.assert_array_equal(extra["note"], np.arange(3))
    with pytest.raises(ContractError):
        gon.load_checkpoint(path, expect={"k": 5})
