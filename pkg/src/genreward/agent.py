"""Replay buffer, observation encoder and a double Q-learner over discrete actions.

Observations are binary-colored renders, so replay stores them as uint8
(value x 255) and keeps float copies of the derived state vectors alongside
so that minibatches never re-run the encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import (
    Mlp, OptState, ShapeError, mlp_backward, mlp_forward, mlp_forward_cached,
    optimizer_step, soft_update,
)


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    t: int

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError(f"transition reward is not finite ({self.reward})")


class EmptyBufferError(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity FIFO ring.

    ``extras`` names per-transition float vectors cached with each entry
    (for example the encoded state and next state); their widths are fixed
    on the first push.
    """

    def __init__(self, capacity: int, obs_shape: tuple, n_actions: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.n_actions = int(n_actions)
        self.obs = np.zeros((capacity,) + self.obs_shape, dtype=np.uint8)
        self.next_obs = np.zeros((capacity,) + self.obs_shape, dtype=np.uint8)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.done = np.zeros(capacity, dtype=bool)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.extras: dict[str, np.ndarray] = {}
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        n = len(self)
        start = self.inserted % self.capacity if self.inserted > self.capacity else 0
        return (start + np.arange(n)) % self.capacity

    def transition(self, slot: int) -> Transition:
        return Transition(self.obs[slot] / np.float32(255), int(self.action[slot]),
                          float(self.reward[slot]), self.next_obs[slot] / np.float32(255),
                          bool(self.done[slot]), int(self.t[slot]))


def _to_u8(obs) -> np.ndarray:
    return np.rint(np.clip(np.asarray(obs, dtype=np.float32), 0.0, 1.0) * 255).astype(np.uint8)


def replay_push(buffer: ReplayBuffer, tr: Transition, **extras) -> ReplayBuffer:
    if not 0 <= tr.action < buffer.n_actions:
        raise ValueError(f"action {tr.action} outside [0, {buffer.n_actions})")
    if np.shape(tr.obs) != buffer.obs_shape or np.shape(tr.next_obs) != buffer.obs_shape:
        raise ShapeError(f"observation shape must be {buffer.obs_shape}")
    slot = buffer.inserted % buffer.capacity
    buffer.obs[slot] = _to_u8(tr.obs)
    buffer.next_obs[slot] = _to_u8(tr.next_obs)
    buffer.action[slot] = tr.action
    buffer.reward[slot] = tr.reward
    buffer.done[slot] = tr.done
    buffer.t[slot] = tr.t
    for name, vec in extras.items():
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if name not in buffer.extras:
            buffer.extras[name] = np.zeros((buffer.capacity, vec.size), dtype=np.float32)
        buffer.extras[name][slot] = vec
    buffer.inserted += 1
    return buffer


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw with replacement; returns slot indices."""
    n = len(buffer)
    if n == 0:
        raise EmptyBufferError("cannot sample from an empty replay buffer")
    return rng.integers(n, size=batch_size)


# -- RPB1 snapshot: b"RPB1" | u32 count, capacity, C, H, W | records oldest
# first: u8 obs, u8 next_obs, u32 action, f32 reward, u8 done, u32 t.

def save_replay(path, buffer: ReplayBuffer) -> None:
    if len(buffer.obs_shape) != 3:
        raise ShapeError("snapshots store (C, H, W) observations")
    with open(path, "wb") as fh:
        fh.write(b"RPB1")
        fh.write(struct.pack("<5I", len(buffer), buffer.capacity, *buffer.obs_shape))
        for slot in buffer.order():
            fh.write(buffer.obs[slot].tobytes())
            fh.write(buffer.next_obs[slot].tobytes())
            fh.write(struct.pack("<IfBI", int(buffer.action[slot]), float(buffer.reward[slot]),
                                 int(buffer.done[slot]), int(buffer.t[slot])))


def load_replay(path, n_actions: int) -> ReplayBuffer:
    data = Path(path).read_bytes()
    if data[:4] != b"RPB1":
        raise ValueError(f"{path}: not an RPB1 replay snapshot")
    count, capacity, c, h, w = struct.unpack_from("<5I", data, 4)
    buf = ReplayBuffer(capacity, (c, h, w), n_actions)
    off, size = 24, c * h * w
    rec = struct.calcsize("<IfBI")
    for _ in range(count):
        obs = np.frombuffer(data, np.uint8, size, off).reshape(c, h, w)
        nxt = np.frombuffer(data, np.uint8, size, off + size).reshape(c, h, w)
        off += 2 * size
        a, r, d, t = struct.unpack_from("<IfBI", data, off)
        off += rec
        replay_push(buf, Transition(obs / np.float32(255), a, r, nxt / np.float32(255), bool(d), t))
    return buf


def encode_state(encoder_params, obs) -> np.ndarray:
    """Frozen per-frame autoencoder latent of one observation (or a batch), flattened."""
    from .seq_encoder import encode_frames

    obs = np.asarray(obs, dtype=np.float32)
    single = obs.ndim == 3
    lat = encode_frames(encoder_params, obs[None] if single else obs)
    flat = lat.reshape(len(lat), -1)
    return flat[0] if single else flat


@dataclass(frozen=True)
class QConfig:
    hidden: int = 64
    gamma: float = 0.99
    lr: float = 1e-3
    tau: float = 0.01
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3


@dataclass
class QParams:
    net: Mlp
    target: Mlp
    opt: OptState = field(default_factory=OptState)

    @classmethod
    def init(cls, state_dim: int, n_actions: int, cfg: QConfig, rng: np.random.Generator,
             dtype=np.float32) -> "QParams":
        net = Mlp.init([state_dim, cfg.hidden, cfg.hidden, n_actions], rng, dtype=dtype)
        return cls(net, net.copy(), OptState("adam", lr=cfg.lr))

    @property
    def n_actions(self) -> int:
        return self.net.out_dim


def epsilon_at(step: int, total: int, cfg: QConfig) -> float:
    """Linear anneal from ``eps_start`` to ``eps_end`` over the first ``eps_fraction`` of steps."""
    span = max(1, int(cfg.eps_fraction * total))
    frac = min(max(step, 0) / span, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def td_targets(params: QParams, r, s_next, done, gamma: float) -> np.ndarray:
    """Double-Q target: online net picks the next action, target net evaluates it."""
    r = np.asarray(r, dtype=np.float64)
    if gamma == 0.0:
        return r.copy()
    a_next = np.argmax(mlp_forward(params.net, s_next), axis=1)
    q_next = mlp_forward(params.target, s_next)[np.arange(len(a_next)), a_next]
    return r + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * q_next


def td_loss_and_grad(params: QParams, s, a, y, grad: bool = True):
    """Mean squared error between ``Q(s, a)`` and fixed targets ``y``."""
    s = np.asarray(s, dtype=params.net.dtype)
    a = np.asarray(a, dtype=int)
    if len(s) == 0:
        raise ValueError("empty batch")
    q, cache = mlp_forward_cached(params.net, s)
    rows = np.arange(len(a))
    err = q[rows, a].astype(np.float64) - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError(f"TD loss is not finite ({loss})")
    if not grad:
        return loss, None
    g = np.zeros_like(q)
    g[rows, a] = 2.0 * err / len(a)
    grads, _ = mlp_backward(params.net, cache, g)
    return loss, grads


def q_update(params: QParams, batch, gamma: float, lr: float | None = None, tau: float = 0.01):
    """One double-DQN step on ``batch = (s, a, r, s_next, done)``; returns ``(params, td_loss)``."""
    s, a, r, s_next, done = batch
    y = td_targets(params, r, s_next, done, gamma)
    loss, grads = td_loss_and_grad(params, s, a, y)
    if lr is not None:
        params.opt.lr = lr
    optimizer_step(params.opt, params.net.arrays(), grads)
    soft_update(params.target.arrays(), params.net.arrays(), tau)
    return params, loss


def q_values(params: QParams, s) -> np.ndarray:
    s = np.asarray(s, dtype=params.net.dtype)
    out = mlp_forward(params.net, s[None] if s.ndim == 1 else s)
    return out[0] if s.ndim == 1 else out


def act_epsilon_greedy(params: QParams, s, eps: float, rng: np.random.Generator) -> int:
    """Uniform action with probability ``eps``, else greedy (ties to the lowest index)."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(params.n_actions))
    return int(np.argmax(q_values(params, s)))


def save_q(path, params: QParams) -> None:
    from .numcore import save_arrays

    save_arrays(path, params.net.arrays() + params.target.arrays())


def load_q(path, state_dim: int, n_actions: int, cfg: QConfig) -> QParams:
    from .numcore import load_arrays

    params = QParams.init(state_dim, n_actions, cfg, np.random.default_rng(0))
    arrays = load_arrays(path)
    n = len(params.net.arrays())
    if len(arrays) != 2 * n:
        raise ShapeError("checkpoint does not match the Q network configuration")
    params.net.load_arrays(arrays[:n])
    params.target.load_arrays(arrays[n:])
    return params
