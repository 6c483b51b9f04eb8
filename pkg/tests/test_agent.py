import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import chi2_sf
from genreward.agent import (
    EmptyBufferError, QConfig, QParams, ReplayBuffer, Transition, act_epsilon_greedy, encode_state,
    epsilon_at, load_q, load_replay, q_update, q_values, replay_push, replay_sample, save_q,
    save_replay, td_targets,
)
from genreward.gridworld import GridConfig, GridState, render
from genreward.numcore import checksum
from genreward.seq_encoder import EncoderConfig, SeqEncoderParams

OBS = (3, 4, 4)


def _tr(t, rng=None, reward=0.0):
    rng = rng or np.random.default_rng(t)
    return Transition(rng.integers(0, 2, OBS).astype(np.float32), t % 5, reward,
                      rng.integers(0, 2, OBS).astype(np.float32), False, t)


def test_fifo_eviction():
    buf = ReplayBuffer(2, OBS, 5)
    for t in range(3):
        replay_push(buf, _tr(t))
    assert len(buf) == 2
    assert [int(buf.t[i]) for i in buf.order()] == [1, 2]


@given(st.integers(1, 20), st.integers(0, 60))
def test_capacity_and_order(cap, n):
    buf = ReplayBuffer(cap, OBS, 5)
    for t in range(n):
        replay_push(buf, _tr(t), s=np.full(2, t))
    assert len(buf) == min(n, cap)
    kept = [int(buf.t[i]) for i in buf.order()]
    assert kept == list(range(max(0, n - cap), n))
    if n:
        assert [int(buf.extras["s"][i][0]) for i in buf.order()] == kept


def test_push_validation():
    buf = ReplayBuffer(4, OBS, 5)
    bad = _tr(0)
    bad.action = 7
    with pytest.raises(ValueError):
        replay_push(buf, bad)
    with pytest.raises(ValueError):
        Transition(np.zeros(OBS), 0, float("inf"), np.zeros(OBS), False, 1)


def test_sampling_contract():
    buf = ReplayBuffer(10, OBS, 5)
    with pytest.raises(EmptyBufferError):
        replay_sample(buf, 4, np.random.default_rng(0))
    replay_push(buf, _tr(0))
    np.testing.assert_array_equal(replay_sample(buf, 8, np.random.default_rng(0)), np.zeros(8))
    for t in range(1, 10):
        replay_push(buf, _tr(t))
    a = replay_sample(buf, 16, np.random.default_rng(3))
    np.testing.assert_array_equal(a, replay_sample(buf, 16, np.random.default_rng(3)))


def test_sampling_uniform():
    buf = ReplayBuffer(10, OBS, 5)
    for t in range(10):
        replay_push(buf, _tr(t))
    counts = np.bincount(replay_sample(buf, 100_000, np.random.default_rng(11)), minlength=10)
    stat = float(np.sum((counts - 10_000) ** 2 / 10_000))
    assert chi2_sf(stat, 9) > 0.01


def test_replay_snapshot_roundtrip(tmp_path):
    buf = ReplayBuffer(3, OBS, 5)
    for t in range(5):
        replay_push(buf, _tr(t, reward=0.25 * t))
    save_replay(tmp_path / "r.rpb1", buf)
    back = load_replay(tmp_path / "r.rpb1", 5)
    assert len(back) == 3
    for i, j in zip(buf.order(), back.order()):
        a, b = buf.transition(i), back.transition(j)
        assert (a.action, a.reward, a.done, a.t) == (b.action, b.reward, b.done, b.t)
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.next_obs, b.next_obs)


def test_encode_state_contract():
    enc = SeqEncoderParams.init(EncoderConfig(), np.random.default_rng(0))
    cfg = GridConfig()
    targets = {"red": (0, 0), "green": (8, 8), "blue": (4, 4)}
    a = render(GridState(cfg, (2, 3), targets, "red"))
    b = render(GridState(cfg, (2, 4), targets, "red"))
    sa = encode_state(enc, a)
    assert sa.shape == (4 * 6 * 6,)
    assert encode_state(enc, a).tobytes() == sa.tobytes()
    assert np.linalg.norm(sa - encode_state(enc, b)) > 1e-4
    assert encode_state(enc, np.stack([a, b])).shape == (2, 144)


def test_td_targets():
    q = QParams.init(4, 3, QConfig(), np.random.default_rng(0))
    r = np.array([0.5, -1.0, 2.0])
    s2 = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(td_targets(q, r, s2, np.ones(3, bool), 0.99), r)
    np.testing.assert_array_equal(td_targets(q, r, s2, np.zeros(3, bool), 0.0), r)
    y = td_targets(q, r, s2, np.zeros(3, bool), 0.9)
    a_next = np.argmax(q_values(q, s2), axis=1)
    np.testing.assert_allclose(y, r + 0.9 * q_values(q, s2)[np.arange(3), a_next], rtol=1e-6)


def test_q_update_reproducible():
    def run():
        r = np.random.default_rng(5)
        q = QParams.init(6, 5, QConfig(), np.random.default_rng(2))
        losses = []
        for _ in range(20):
            batch = (r.standard_normal((16, 6)), r.integers(5, size=16), r.standard_normal(16),
                     r.standard_normal((16, 6)), r.random(16) < 0.1)
            losses.append(q_update(q, batch, 0.99)[1])
        return checksum(q.net.arrays() + q.target.arrays()), losses

    assert run() == run()


def test_q_update_fits_constant_reward():
    r = np.random.default_rng(0)
    q = QParams.init(3, 2, QConfig(lr=1e-2), r)
    s = r.standard_normal((64, 3))
    a = r.integers(2, size=64)
    for _ in range(300):
        _, loss = q_update(q, (s, a, np.ones(64), s, np.ones(64, bool)), 0.99)
    assert loss < 1e-3


def test_greedy_and_uniform_exploration():
    q = QParams.init(2, 5, QConfig(), np.random.default_rng(0))
    for w in q.net.weights:
        w[...] = 0
    q.net.biases[-1][...] = [0, 5, 1, 1, 1]
    assert act_epsilon_greedy(q, np.zeros(2), 0.0, np.random.default_rng(0)) == 1
    r = np.random.default_rng(7)
    counts = np.bincount([act_epsilon_greedy(q, np.zeros(2), 1.0, r) for _ in range(20_000)], minlength=5)
    stat = float(np.sum((counts - 4000) ** 2 / 4000))
    assert chi2_sf(stat, 4) > 0.01
    a = [act_epsilon_greedy(q, np.zeros(2), 0.5, np.random.default_rng(3)) for _ in range(5)]
    assert len(set(a)) == 1


def test_epsilon_schedule():
    cfg = QConfig()
    assert epsilon_at(0, 1000, cfg) == 1.0
    assert epsilon_at(150, 1000, cfg) == pytest.approx(0.525)
    assert epsilon_at(300, 1000, cfg) == pytest.approx(0.05)
    assert epsilon_at(999, 1000, cfg) == pytest.approx(0.05)


def test_q_checkpoint(tmp_path):
    q = QParams.init(4, 5, QConfig(hidden=8), np.random.default_rng(0))
    save_q(tmp_path / "q.nnp", q)
    back = load_q(tmp_path / "q.nnp", 4, 5, QConfig(hidden=8))
    assert checksum(back.net.arrays()) == checksum(q.net.arrays())
