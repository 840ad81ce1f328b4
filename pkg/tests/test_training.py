import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chdqr.config import DynamicsConfig, LossConfig, TrainConfig
from chdqr.data import Dataset, gen_uncond1d
from chdqr.errors import ConfigError
from chdqr.geometry import BoundingBox, voronoi_areas
from chdqr.network import DensityNetwork, log_softmax
from chdqr.quantizer import PrototypeSet, soft_labels
from chdqr.training import (add_remove_prototypes, composite_loss, fit, init_state,
                            loss_cross_entropy, loss_quantization, loss_repulsion)

BOX1 = BoundingBox(np.array([-2.0]), np.array([2.0]))


def test_cross_entropy_examples(rng):
    assert loss_cross_entropy(np.log([[1.0, 1e-300]]), [[1.0, 0.0]]) == pytest.approx(0.0)
    u = np.full((1, 4), 0.25)
    assert loss_cross_entropy(np.log(u), u) == pytest.approx(np.log(4), abs=1e-4)
    q = rng.dirichlet(np.ones(6), size=3)
    lp = log_softmax(rng.normal(size=(3, 6)))
    want = np.mean([-sum(q[r, i] * lp[r, i] for i in range(6)) for r in range(3)])
    assert loss_cross_entropy(lp, q) == pytest.approx(want, rel=1e-12)


def test_quantization_examples():
    v, g = loss_quantization([[1.0]], [[0.0], [1.0]])
    assert v == 0.0 and np.all(g == 0)
    v, g = loss_quantization([[0.4]], [[0.0], [1.0]])
    assert v == pytest.approx(0.4)
    # a descent step moves the nearest prototype (c_0 = 0) toward y = 0.4
    assert g[0, 0] < 0 and g[1, 0] == 0


def test_repulsion_examples():
    assert loss_repulsion([[0.0], [1.0], [3.0]], 0.5)[0] == 0.0
    v, _ = loss_repulsion([[0.2, 0.2], [0.2, 0.2]], 0.1)
    assert v == pytest.approx(0.2)
    c = np.array([[0.0, 0.0], [0.05, 0.0], [3.0, 3.0]])
    _, g = loss_repulsion(c, 0.5)
    c2 = c - 0.01 * g
    assert np.linalg.norm(c2[0] - c2[1]) > np.linalg.norm(c[0] - c[1])


def _numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-4, np.abs(a) + np.abs(b)))


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_prototype_gradients_match_finite_differences(seed, dim):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 8))
    c = rng.uniform(-1, 1, (K, dim))
    Y = rng.uniform(-1, 1, (6, dim))
    delta = 0.8

    _, g_q = loss_quantization(Y, c)
    num_q = _numeric_grad(lambda: loss_quantization(Y, c)[0], c)
    assert _rel_err(g_q, num_q) <= 1e-4

    _, g_r = loss_repulsion(c, delta)
    num_r = _numeric_grad(lambda: loss_repulsion(c, delta)[0], c)
    assert _rel_err(g_r, num_r) <= 1e-4


def _setup(seed, dim, same_x):
    rng = np.random.default_rng(seed)
    K, B, p = 5, 7, 2
    box = BoundingBox(-np.ones(dim) * 3, np.ones(dim) * 3)
    c = rng.uniform(-2, 2, (K, dim))
    net = DensityNetwork(p, [6, 5], K, rng, zero_head=False)
    for b in net.hidden_b:
        b[:] = rng.uniform(0.05, 0.2, b.shape)
    X = np.zeros((B, p)) if same_x else rng.normal(size=(B, p))
    Y = rng.uniform(-2, 2, (B, dim))
    log_areas = np.log(voronoi_areas(PrototypeSet(c, box), box))
    return net, c, log_areas, X, Y


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.booleans())
def test_composite_theta_gradient_matches_finite_differences(seed, dim, same_x):
    net, c, la, X, Y = _setup(seed, dim, same_x)
    cfg = LossConfig(1.0, 0.1, 0.5, 0.7)
    q = soft_labels(Y, c, cfg.tau)  # soft labels are constants for theta
    _, _, g_theta, _ = composite_loss(net, c, la, X, Y, cfg, labels=q)
    for name, p in net.params().items():
        num = _numeric_grad(lambda: composite_loss(net, c, la, X, Y, cfg, labels=q)[0], p)
        assert _rel_err(g_theta[name], num) <= 1e-4, name


def test_composite_weights_zero_is_mean_cross_entropy(rng):
    net, c, la, X, Y = _setup(1, 2, False)
    cfg = LossConfig(0.0, 0.0, 0.5, 0.7)
    total, parts, _, g_c = composite_loss(net, c, la, X, Y, cfg)
    assert total == pytest.approx(parts["ce"])
    logp = log_softmax(net.forward(X) + la)
    assert parts["ce"] == pytest.approx(loss_cross_entropy(logp, soft_labels(Y, c, 0.7)))
    np.testing.assert_array_equal(g_c, 0.0)


def test_composite_zero_at_perfect_fit():
    c = np.array([[-1.0], [1.0]])
    net = DensityNetwork(1, [4], 2, np.random.default_rng(0))
    net.head_b[:] = [0.0, -800.0]
    Y = np.array([[-1.0], [-1.0]])
    total, parts, _, _ = composite_loss(net, c, np.zeros(2), np.zeros((2, 1)), Y,
                                        LossConfig(1.0, 1.0, 0.5, 1e-6))
    assert total == pytest.approx(0.0, abs=1e-12)


def test_shared_forward_pass_matches_full_batch(rng):
    net, c, la, _, Y = _setup(4, 2, True)
    X = np.zeros((len(Y), 2))
    cfg = LossConfig(1.0, 0.1, 0.5, 0.7)
    a = composite_loss(net, c, la, X, Y, cfg)
    X2 = X.copy()
    X2[-1, 0] = 1e-300  # defeats the identical-input shortcut without changing the maths
    b = composite_loss(net, c, la, X2, Y, cfg)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    for k in a[2]:
        np.testing.assert_allclose(a[2][k], b[2][k], rtol=1e-10, atol=1e-14)


def test_attraction_step_reduces_distance():
    c = np.array([[0.0], [1.0]])
    y = np.array([[0.3]])
    _, g = loss_quantization(y, c)
    lr = 0.1  # any step below the current distance 0.3
    c2 = c - lr * g
    assert abs(y[0, 0] - c2[0, 0]) < abs(y[0, 0] - c[0, 0])


# --- dynamics ------------------------------------------------------------

def _state_for(coords, targets, **dyn):
    Y = np.asarray(targets, dtype=float).reshape(-1, 1)
    train = Dataset(np.zeros((len(Y), 1)), Y)
    protos = PrototypeSet(np.asarray(coords, dtype=float).reshape(-1, 1), BOX1)
    cfg = TrainConfig(method="chdqr-dynamic", tau=1e-6, epochs=0, **dyn)
    state, rngs = init_state(train, cfg, protos=protos)
    return state, Y, rngs


def test_dynamics_uniform_usage_no_change():
    state, Y, rngs = _state_for([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0])
    before = state.protos.coords.copy()
    add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
    np.testing.assert_array_equal(state.protos.coords, before)


def test_dynamics_removes_dead_prototype():
    state, Y, rngs = _state_for([-1.0, 0.0, 1.5], [-1.0, 0.0, -1.0, 0.0],
                                add_factor=5.0, del_factor=3e-4)
    add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
    assert state.K == 2
    assert state.net.n_outputs == 2 and len(state.areas) == 2
    np.testing.assert_allclose(state.protos.coords[:, 0], [-1.0, 0.0])


def test_dynamics_splits_heavy_prototype_and_copies_logit():
    state, Y, rngs = _state_for([-1.0, 1.0], [1.0] * 9 + [-1.0], add_factor=1.6, del_factor=0.01)
    state.net.head_b[:] = [0.25, -0.5]
    add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
    assert state.K == 3
    assert state.net.head_b[2] == state.net.head_b[1]
    assert abs(state.protos.coords[2, 0] - 1.0) < 10 * state.dyn_cfg.sigma
    assert state.areas.sum() == pytest.approx(BOX1.volume)


def test_dynamics_respects_k_min_and_k_max():
    state, Y, rngs = _state_for([-1.5, -0.5, 0.5, 1.5], [1.5] * 10, del_factor=0.5, k_min=3)
    add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
    assert state.K >= 3
    state, Y, rngs = _state_for([-1.0, 1.0], [1.0] * 5 + [-1.0] * 5, add_factor=0.5,
                                del_factor=0.0, k_max=3)
    add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
    assert state.K == 3


def test_dynamics_config_validation():
    with pytest.raises(ConfigError):
        DynamicsConfig(add_factor=0.1, del_factor=0.2)
    with pytest.raises(ConfigError):
        DynamicsConfig(k_min=1)
    assert DynamicsConfig().thresholds(100) == (0.05, 0.001)


# --- fit -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_1d():
    return gen_uncond1d(600, seed=3)


def test_zero_epochs_returns_initial_state(small_1d):
    cfg = TrainConfig(method="chdqr", epochs=0, k_init=20)
    state = fit(small_1d, cfg)
    init, _ = init_state(small_1d, cfg)
    np.testing.assert_array_equal(state.protos.coords, init.protos.coords)
    np.testing.assert_array_equal(state.net.head_b, init.net.head_b)
    assert state.history == []


def test_static_variant_keeps_k(small_1d):
    state = fit(small_1d, TrainConfig(method="chdqr", epochs=4, k_init=20))
    assert [h["K"] for h in state.history] == [20] * 4


def test_dynamic_invariants_each_epoch(small_1d):
    seen = []

    def check(state, stats):
        assert state.net.n_outputs == state.K == len(state.areas) == len(state.protos.coords)
        assert 2 <= state.K <= 10_000
        assert np.all(state.protos.box.contains(state.protos.coords))
        seen.append(state.K)

    fit(small_1d, TrainConfig(method="chdqr-dynamic", epochs=6, k_init=30, add_factor=2.0,
                              del_factor=0.5), callback=check)
    assert len(seen) == 6


def test_loss_decreases_early(small_1d):
    state = fit(small_1d, TrainConfig(method="chdqr-dynamic", epochs=12, k_init=30,
                                      lr_theta=1e-2))
    loss = np.array([h["loss"] for h in state.history])
    smooth = np.convolve(loss, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth[:8]) < 0)


def test_fit_deterministic(small_1d):
    cfg = TrainConfig(method="chdqr-dynamic", epochs=3, k_init=25, add_factor=2.0, del_factor=0.5)
    a, b = fit(small_1d, cfg), fit(small_1d, cfg)
    assert a.protos.coords.tobytes() == b.protos.coords.tobytes()
    assert a.net.head_b.tobytes() == b.net.head_b.tobytes()
    assert [h["K"] for h in a.history] == [h["K"] for h in b.history]
