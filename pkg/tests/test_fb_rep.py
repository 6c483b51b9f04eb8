from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from genreward.fb_rep import (
    FBBatch, FBConfig, FBFrozenError, FBParams, backward_rep, fb_loss, fb_reward, fb_train_step,
    forward_rep, goal_projection, ortho_loss, policy_z, sample_z,
)
from genreward.harness.checks import ORACLE_FB, train_tabular_fb
from genreward.numcore import Mlp, checksum
from genreward.oracle import chain_mdp, policy_matrix, successor_measure

S_DIM, A, G_DIM = 6, 5, 4


def _params(seed=0, **kw):
    cfg = FBConfig(d=kw.pop("d", 8), hidden=kw.pop("hidden", 16), **kw)
    return FBParams.init(cfg, S_DIM, A, G_DIM, np.random.default_rng(seed))


def _batch(r, n=12):
    return FBBatch(r.standard_normal((n, S_DIM)), r.integers(A, size=n), r.standard_normal((n, S_DIM)),
                   r.standard_normal((n, G_DIM)), r.standard_normal((n, G_DIM)))


def _constant(params, f, b):
    """Zero every weight so F outputs ``f`` and B outputs ``b`` everywhere."""
    for net, out in ((params.F, f), (params.B, b)):
        for w, bias in zip(net.weights, net.biases):
            w[...] = 0
            bias[...] = 0
        net.biases[-1][...] = out
    params.F_target = params.F.copy()
    params.B_target = params.B.copy()


def _relu_mlp(net, x):
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.astype(np.float64) + b
        if i < len(net.weights) - 1:
            h = np.maximum(h, 0)
    return h


def test_forward_backward_widths_and_recompute(rng):
    p = _params()
    s, z, g = rng.standard_normal((3, S_DIM)), rng.standard_normal((3, 8)), rng.standard_normal((3, G_DIM))
    a = np.array([0, 4, 2])
    f = forward_rep(p, s, a, z)
    assert f.shape == (3, 8)
    x = np.concatenate([s, np.eye(A)[a], z], axis=1)
    np.testing.assert_allclose(f, _relu_mlp(p.F, x), atol=1e-5)
    b = backward_rep(p, g)
    np.testing.assert_allclose(b, _relu_mlp(p.B, g), atol=1e-5)
    assert forward_rep(p, s, a, z).tobytes() == f.tobytes()
    assert backward_rep(p, g).tobytes() == b.tobytes()
    assert forward_rep(p, s[0], 1, z[0]).shape == (8,)


def test_policy_single_action():
    cfg = FBConfig(d=3, hidden=4)
    p = FBParams.init(cfg, 2, 1, 2, np.random.default_rng(0))
    assert policy_z(p, np.ones(2), np.ones(3)) == 0


def test_policy_rigged_scores():
    cfg = FBConfig(d=1)
    W = np.zeros((1 + 3 + 1, 1), dtype=np.float32)
    W[1:4, 0] = [1.0, 3.0, 2.0]
    F = Mlp([W], [np.zeros(1, np.float32)], [])
    B = Mlp([np.ones((1, 1), np.float32)], [np.zeros(1, np.float32)], [])
    p = FBParams.from_networks(cfg, F, B, 1, 3, 1, np.ones((1, 1), np.float32))
    assert policy_z(p, np.zeros(1), np.ones(1)) == 1


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), st.integers(0, 50))
def test_policy_invariant_to_output_offset(c, seed):
    p = FBParams.init(FBConfig(d=8, hidden=16), S_DIM, A, G_DIM, np.random.default_rng(0), dtype=np.float64)
    r = np.random.default_rng(seed)
    s, z = r.standard_normal((10, S_DIM)), r.standard_normal((10, 8))
    before = policy_z(p, s, z)
    p.F.biases[-1] += c
    np.testing.assert_array_equal(policy_z(p, s, z), before)


def test_goal_only_loss_rigged_unit_product():
    for gamma in (0.0, 0.5, 0.9):
        p = _params(variant="goal-only", gamma=gamma, d=4)
        _constant(p, np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]))
        b = _batch(np.random.default_rng(1))
        loss = fb_loss(p, b, np.ones(G_DIM), np.ones(4))
        assert loss == pytest.approx((1 - gamma) ** 2 - 2, abs=1e-6)


def test_goal_only_loss_is_minimised_at_unit_q():
    qs = np.linspace(-1, 3, 41)
    losses = []
    for q in qs:
        p = _params(variant="goal-only", gamma=0.0, d=4)
        _constant(p, np.array([q, 0, 0, 0]), np.array([1.0, 0, 0, 0]))
        losses.append(fb_loss(p, _batch(np.random.default_rng(2)), np.ones(G_DIM), np.ones(4)))
    np.testing.assert_allclose(losses, qs ** 2 - 2 * qs, atol=1e-5)
    assert qs[int(np.argmin(losses))] == pytest.approx(1.0)


def test_ortho_examples():
    d = 4
    basis = np.sqrt(d) * np.eye(d)
    assert ortho_loss(np.concatenate([basis, basis])) == pytest.approx(0.0, abs=1e-12)
    assert ortho_loss(np.zeros((1, d))) == pytest.approx(d)
    same = np.tile(np.sqrt(d) * np.eye(d)[0], (6, 1))
    assert ortho_loss(same) == pytest.approx((d - 1) ** 2 + (d - 1))


@given(arrays(np.float64, (7, 3), elements=st.floats(-10, 10)))
def test_ortho_nonnegative(b):
    assert ortho_loss(b) >= 0.0


def test_sample_z_modes(rng):
    g = rng.standard_normal(G_DIM)
    p = _params(p_goal=1.0)
    z = sample_z(p, g, rng, n=20)
    np.testing.assert_allclose(z, np.tile(goal_projection(p, g), (20, 1)), atol=1e-6)
    p = _params(p_goal=0.0)
    z = sample_z(p, g, rng, n=50)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.sqrt(8), rtol=1e-5)
    a = sample_z(_params(), g, np.random.default_rng(4), n=9)
    b = sample_z(_params(), g, np.random.default_rng(4), n=9)
    np.testing.assert_array_equal(a, b)


def test_train_step_counts_targets_and_freeze(rng):
    p = _params(budget=3, tau=0.05)
    b = _batch(rng)
    old_targets = [t.copy() for t in p.target_arrays()]
    _, metrics = fb_train_step(p, b, np.ones(G_DIM), rng)
    assert p.steps == 1 and set(metrics) >= {"L_FB", "L_norm", "total"}
    for old, new_t, online in zip(old_targets, p.target_arrays(), p.online_fb_arrays()):
        np.testing.assert_allclose(new_t, 0.95 * old + 0.05 * online, rtol=1e-5, atol=1e-7)
    fb_train_step(p, b, np.ones(G_DIM), rng)
    fb_train_step(p, b, np.ones(G_DIM), rng)
    assert p.frozen
    before = checksum(p.arrays() + p.target_arrays())
    with pytest.raises(FBFrozenError):
        fb_train_step(p, b, np.ones(G_DIM), rng)
    fb_reward(p, b.s[0], 1, np.ones(G_DIM))
    policy_z(p, b.s, sample_z(p, np.ones(G_DIM), rng, n=12))
    assert checksum(p.arrays() + p.target_arrays()) == before


def test_reward_rigs():
    p = _params(d=4)
    _constant(p, np.array([1.0, 0, 0, 0]), np.zeros(4))
    assert fb_reward(p, np.ones(S_DIM), 0, np.ones(G_DIM)) == 0.0
    _constant(p, np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]))
    assert fb_reward(p, np.ones(S_DIM), 2, np.ones(G_DIM)) == pytest.approx(1.0)


def test_both_variants_finite(rng):
    for variant in ("goal-only", "standard"):
        p = _params(variant=variant)
        assert np.isfinite(fb_loss(p, _batch(rng), np.ones(G_DIM), np.ones(8)))
    with pytest.raises(ValueError):
        FBConfig(variant="other")


def test_cosine_schedule():
    cfg = FBConfig(lr=1e-3, lr_final=1e-5, lr_schedule="cosine", budget=100)
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(50) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert cfg.lr_at(100) == pytest.approx(1e-5)
    assert FBConfig(lr=2e-4).lr_at(77) == 2e-4


@pytest.fixture(scope="module")
def chain_run():
    mdp = chain_mdp(8, 0.9)
    cfg = replace(ORACLE_FB, hidden=32, batch_size=64, budget=20_000)
    losses = []
    params = train_tabular_fb(mdp, cfg, seed=0, callback=lambda k, p, m: losses.append(m["total"]))
    return mdp, params, np.array(losses)


def test_chain_loss_decreases(chain_run):
    _, _, losses = chain_run
    assert losses[-100:].mean() < losses[900:1000].mean()


def test_chain_reward_tracks_occupancy(chain_run):
    mdp, p, _ = chain_run
    S = mdp.n_states
    eye = np.eye(S, dtype=np.float32)
    goal = eye[mdp.goal]
    z = goal_projection(p, goal)
    M = successor_measure(mdp, policy_matrix(policy_z(p, eye, z), mdp.n_actions))
    s = np.repeat(eye, mdp.n_actions, axis=0)
    a = np.tile(np.arange(mdp.n_actions), S)
    r = fb_reward(p, s, a, goal)
    true = (M[:, :, mdp.goal] * S).reshape(-1)
    assert np.corrcoef(r, true)[0, 1] > 0.9


def test_pairwise_ortho_matches_brute_force(rng):
    b = rng.standard_normal((7, 3))
    n, d = b.shape
    pairs = [(b[i] @ b[j]) ** 2 for i in range(n) for j in range(n) if i != j]
    expected = np.mean(pairs) - 2 * np.mean(np.sum(b * b, axis=1)) + d
    assert ortho_loss(b, estimator="pairwise") == pytest.approx(expected, rel=1e-12)


def test_pairwise_ortho_is_unbiased():
    # isotropic unit-covariance samples: the population value is exactly 0,
    # the plug-in value carries (d^2 + d) / n of batch noise
    rng = np.random.default_rng(3)
    n, d = 16, 4
    batches = rng.standard_normal((4000, n, d))
    pairwise = np.mean([ortho_loss(x, estimator="pairwise") for x in batches])
    plug_in = np.mean([ortho_loss(x) for x in batches])
    assert abs(pairwise) < 0.05
    assert plug_in == pytest.approx((d * d + d) / n, rel=0.05)


def test_ortho_estimator_validation():
    with pytest.raises(ValueError):
        ortho_loss(np.ones((3, 2)), estimator="median")
    with pytest.raises(ValueError):
        FBConfig(ortho_estimator="median")
