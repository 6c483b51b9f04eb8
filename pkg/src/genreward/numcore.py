"""Small deterministic numerical kernel.

Multilayer perceptrons with hand-written backpropagation, SGD/Adam,
central-difference gradient checking, and the NNP1 checkpoint format.
Parameters are plain lists of numpy arrays so that composite models can
concatenate them and hand them to a single optimizer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


@dataclass
class Mlp:
    """Fully connected network ``x @ W + b`` with per-hidden-layer activations.

    The output layer is always linear; callers add squashing themselves.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.activations:
            self.activations = ["relu"] * (len(self.weights) - 1)
        if len(self.activations) != len(self.weights) - 1:
            raise ShapeError("need one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise ShapeError(
                    f"layer {i} expects width {self.weights[i].shape[0]}, "
                    f"previous layer emits {self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator,
             activation: str = "relu", dtype=np.float32) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, [activation] * (len(sizes) - 2))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights],
                   [b.astype(dtype) for b in self.biases], list(self.activations))

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        """Copy values from a flat ``[W0, b0, W1, b1, ...]`` list in place."""
        mine = self.arrays()
        if len(arrays) != len(mine):
            raise ShapeError(f"expected {len(mine)} arrays, got {len(arrays)}")
        for dst, src in zip(mine, arrays):
            if dst.shape != tuple(src.shape):
                raise ShapeError(f"array shape {tuple(src.shape)} does not match {dst.shape}")
            dst[...] = src


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - a * a)
    return g


def _check_input(params: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with first layer "
                         f"{params.weights[0].shape}")
    return x.astype(params.dtype, copy=False)


def mlp_forward_cached(params: Mlp, x: np.ndarray):
    """Forward pass returning ``(output, cache)`` for :func:`mlp_backward`."""
    x = _check_input(params, x)
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    cache = [h]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i < n - 1:
            a = _act(params.activations[i], z)
            cache.append((z, a))
            h = a
        else:
            h = z
    return h.reshape(lead + (h.shape[-1],)), cache


def mlp_forward(params: Mlp, x: np.ndarray) -> np.ndarray:
    return mlp_forward_cached(params, x)[0]


def mlp_backward(params: Mlp, x_or_cache, upstream: np.ndarray):
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is ordered
    like ``params.arrays()``.  Accepts either the raw input or the cache
    produced by :func:`mlp_forward_cached`.
    """
    if isinstance(x_or_cache, list):
        cache = x_or_cache
    else:
        _, cache = mlp_forward_cached(params, x_or_cache)
    x = cache[0]
    g = np.asarray(upstream, dtype=params.dtype)
    if g.shape[-1] != params.out_dim or g.size // g.shape[-1] != x.shape[0]:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output "
                         f"({x.shape[0]}, {params.out_dim})")
    lead = g.shape[:-1]
    g = g.reshape(-1, g.shape[-1])
    n = len(params.weights)
    grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        h_in = cache[0] if i == 0 else cache[i][1]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            z, a = cache[i]
            g = _act_grad(params.activations[i - 1], z, a, g)
    return grads, g.reshape(lead + (x.shape[-1],))


def grad_check(loss_and_grad: Callable[[], tuple[float, list[np.ndarray]]],
               params: Sequence[np.ndarray], eps: float = 1e-4,
               rng: np.random.Generator | None = None,
               max_per_array: int | None = 48) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over checked entries.

    ``loss_and_grad`` reads ``params`` by reference; entries are perturbed in
    place and restored.  At most ``max_per_array`` randomly chosen entries of
    each array are checked (``None`` checks all of them).  Use float64
    parameters; float32 central differences are too noisy at ``eps=1e-4``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss, grads = loss_and_grad()
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss}")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        if max_per_array is None or flat.size <= max_per_array:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_per_array, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i].copy()
            flat[i] = orig + eps
            up = loss_and_grad()[0]
            flat[i] = orig - eps
            down = loss_and_grad()[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss became non-finite during the check")
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return float(worst)


@dataclass
class OptState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptState, params: Sequence[np.ndarray],
                   grads: Sequence[np.ndarray]):
    """Update ``params`` in place; returns ``(params, state)``.

    Non-finite gradients raise before any parameter is touched.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; parameters left untouched")
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= (state.lr * np.asarray(g)).astype(p.dtype)
        return params, state
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of the flattened inputs; 0 when either norm is < 1e-12."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size != v.size:
        raise ShapeError(f"cosine needs equal sizes, got {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def soft_update(target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float):
    """Polyak average ``target <- (1 - tau) * target + tau * online`` in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for t, o in zip(target, online):
        if tau == 1.0:
            t[...] = o
        elif tau > 0.0:
            t *= 1 - tau
            t += tau * o
    return target


def one_hot(idx, n: int, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (n,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1, axis=-1)
    return out


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    return np.argmax(scores, axis=-1)


# -- NNP1 checkpoints ---------------------------------------------------------
#
# b"NNP1" | u32 array count | per array: u32 ndim, ndim x u32 dims,
# little-endian f32 payload in C order.

MAGIC = b"NNP1"


def save_arrays(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_arrays(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an NNP1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
        off += 4 * n
    return out


def checksum(arrays: Sequence[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
