"""Forward-backward representations of the successor measure.

``F(s, a, z) . B(g(s'))`` approximates ``M^{pi_z}(s, a, s') / rho(s')`` where
``pi_z(s) = argmax_a F(s, a, z) . z``.  ``B`` reads goal embeddings (the same
embedder serves replay states and the selected goal frame); a learned
linear map sends a goal embedding to its policy vector ``z``.

Two Bellman-residual losses are available:

``goal-only``
    every term evaluates ``B`` at the single goal embedding.
``standard``
    the squared term pairs each ``(s, a)`` with the embeddings of the other
    batch states (draws from rho) and the linear term uses the embedding of
    ``s_{t+1}``.

Targets ``F_target`` / ``B_target`` only enter the bootstrap term and are
moved by Polyak averaging after each optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    Mlp, OptState, ShapeError, mlp_backward, mlp_forward, mlp_forward_cached,
    one_hot, optimizer_step, soft_update,
)

LOSS_VARIANTS = ("goal-only", "standard")


class FBFrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class FBConfig:
    variant: str = "goal-only"
    gamma: float = 0.997
    d: int = 32
    hidden: int = 256
    ortho_weight: float = 1.0
    ortho_estimator: str = "pairwise"   # pairwise (unbiased) | batch
    proj_weight: float = 1.0
    p_goal: float = 0.5
    lr: float = 1e-4
    tau: float = 0.01
    budget: int = 20_000
    batch_size: int = 256
    random_only: bool = False
    lr_schedule: str = "constant"
    lr_final: float = 0.0
    tie_tol: float = 0.0

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown FB loss variant {self.variant!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.p_goal <= 1.0:
            raise ValueError("p_goal must lie in [0, 1]")
        if self.ortho_estimator not in ("pairwise", "batch"):
            raise ValueError(f"unknown ortho estimator {self.ortho_estimator!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(step / max(self.budget, 1), 1.0)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + np.cos(np.pi * frac))


@dataclass
class FBBatch:
    s: np.ndarray          # (N, state_dim)
    a: np.ndarray          # (N,) action indices
    s_next: np.ndarray     # (N, state_dim)
    g: np.ndarray          # (N, goal_dim) goal-space embedding of s
    g_next: np.ndarray     # (N, goal_dim) goal-space embedding of s_next

    def __len__(self):
        return len(self.a)


@dataclass
class FBParams:
    cfg: FBConfig
    F: Mlp
    B: Mlp
    proj: np.ndarray                 # (goal_dim, d)
    F_target: Mlp
    B_target: Mlp
    state_dim: int
    n_actions: int
    goal_dim: int
    frozen: bool = False
    steps: int = 0
    opt: OptState = field(default_factory=OptState)

    @classmethod
    def init(cls, cfg: FBConfig, state_dim: int, n_actions: int, goal_dim: int,
             rng: np.random.Generator, dtype=np.float32) -> "FBParams":
        F = Mlp.init([state_dim + n_actions + cfg.d, cfg.hidden, cfg.hidden, cfg.d], rng, dtype=dtype)
        B = Mlp.init([goal_dim, cfg.hidden, cfg.hidden, cfg.d], rng, dtype=dtype)
        lim = np.sqrt(6.0 / (goal_dim + cfg.d))
        proj = rng.uniform(-lim, lim, (goal_dim, cfg.d)).astype(dtype)
        return cls.from_networks(cfg, F, B, state_dim, n_actions, goal_dim, proj)

    @classmethod
    def from_networks(cls, cfg: FBConfig, F: Mlp, B: Mlp, state_dim: int, n_actions: int,
                      goal_dim: int, proj: np.ndarray) -> "FBParams":
        if F.in_dim != state_dim + n_actions + cfg.d or F.out_dim != cfg.d:
            raise ShapeError(f"F must map {state_dim + n_actions + cfg.d} -> {cfg.d}")
        if B.in_dim != goal_dim or B.out_dim != cfg.d:
            raise ShapeError(f"B must map {goal_dim} -> {cfg.d}")
        if proj.shape != (goal_dim, cfg.d):
            raise ShapeError(f"goal projection must be {(goal_dim, cfg.d)}")
        return cls(cfg, F, B, proj, F.copy(), B.copy(), state_dim, n_actions, goal_dim,
                   opt=OptState("adam", lr=cfg.lr))

    def arrays(self) -> list[np.ndarray]:
        return self.F.arrays() + self.B.arrays() + [self.proj]

    def target_arrays(self) -> list[np.ndarray]:
        return self.F_target.arrays() + self.B_target.arrays()

    def online_fb_arrays(self) -> list[np.ndarray]:
        return self.F.arrays() + self.B.arrays()

    def metadata(self) -> dict:
        return {"variant": self.cfg.variant, "d": self.cfg.d, "gamma": self.cfg.gamma,
                "steps": self.steps, "frozen": self.frozen, "state_dim": self.state_dim,
                "n_actions": self.n_actions, "goal_dim": self.goal_dim}


def _rows(x, width: int, name: str, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != width:
        raise ShapeError(f"{name} width {x.shape[-1]} != {width}")
    return x


def _f_input(params: FBParams, s, a, z) -> np.ndarray:
    dt = params.F.dtype
    s = _rows(s, params.state_dim, "state", dt)
    z = _rows(z, params.cfg.d, "z", dt)
    a = np.asarray(a, dtype=int).reshape(-1)
    n = max(len(s), len(z), len(a))
    s = np.broadcast_to(s, (n, s.shape[1]))
    z = np.broadcast_to(z, (n, z.shape[1]))
    a = np.broadcast_to(a, (n,))
    return np.concatenate([s, one_hot(a, params.n_actions, dt), z], axis=1)


def forward_rep(params: FBParams, s, a, z, target: bool = False) -> np.ndarray:
    """``F(s, a, z)``; rows broadcast across ``s``, ``a`` and ``z``."""
    net = params.F_target if target else params.F
    out = mlp_forward(net, _f_input(params, s, a, z))
    return out[0] if np.ndim(s) == 1 and np.ndim(z) == 1 and np.ndim(a) == 0 else out


def backward_rep(params: FBParams, g, target: bool = False) -> np.ndarray:
    net = params.B_target if target else params.B
    out = mlp_forward(net, _rows(g, params.goal_dim, "goal embedding", net.dtype))
    return out[0] if np.ndim(g) == 1 else out


def goal_projection(params: FBParams, goal_emb) -> np.ndarray:
    """Policy vector for a goal embedding: the linear projection rescaled to norm sqrt(d)."""
    g = _rows(goal_emb, params.goal_dim, "goal embedding", params.proj.dtype)
    z = g @ params.proj
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    z = np.sqrt(params.cfg.d) * z / np.maximum(norm, 1e-12)
    return z[0] if np.ndim(goal_emb) == 1 else z


def _all_action_scores(params: FBParams, s: np.ndarray, z: np.ndarray, target=False) -> np.ndarray:
    n, A = len(s), params.n_actions
    s_rep = np.repeat(s, A, axis=0)
    z_rep = np.repeat(z, A, axis=0)
    a_rep = np.tile(np.arange(A), n)
    net = params.F_target if target else params.F
    Fo = mlp_forward(net, _f_input(params, s_rep, a_rep, z_rep)).reshape(n, A, -1)
    return np.einsum("nad,nd->na", Fo, z)


def _greedy(scores: np.ndarray, tol: float) -> np.ndarray:
    """Lowest action index whose score is within ``tol * |max|`` of the best."""
    best = scores.max(axis=1, keepdims=True)
    if tol <= 0:
        return np.argmax(scores, axis=1)
    near = scores >= best - tol * np.abs(best)
    return np.argmax(near, axis=1)


def policy_z(params: FBParams, s, z) -> np.ndarray | int:
    """``argmax_a F(s, a, z) . z`` with ties (up to ``cfg.tie_tol``) to the lowest index."""
    single = np.ndim(s) == 1
    dt = params.F.dtype
    s = _rows(s, params.state_dim, "state", dt)
    z = _rows(z, params.cfg.d, "z", dt)
    n = max(len(s), len(z))
    s = np.broadcast_to(s, (n, s.shape[1]))
    z = np.broadcast_to(z, (n, z.shape[1]))
    act = _greedy(_all_action_scores(params, s, z), params.cfg.tie_tol)
    return int(act[0]) if single else act


def sample_z(params: FBParams, goal_emb, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Per row: the goal projection with probability ``p_goal``, else a Gaussian of norm sqrt(d).

    ``goal_emb`` is one embedding shared by all rows or one per row.
    """
    single = n is None
    n = 1 if n is None else n
    d = params.cfg.d
    gauss = rng.standard_normal((n, d))
    gauss = np.sqrt(d) * gauss / np.linalg.norm(gauss, axis=1, keepdims=True)
    use_goal = rng.random(n) < params.cfg.p_goal
    z = gauss
    if use_goal.any() and goal_emb is not None:
        goals = np.asarray(goal_emb)
        gz = goal_projection(params, goals if goals.ndim == 1 else goals[use_goal])
        z = gauss.copy()
        z[use_goal] = gz
    z = z.astype(params.F.dtype)
    return z[0] if single else z


def ortho_loss(b: np.ndarray, grad: bool = False, estimator: str = "batch"):
    """Estimate of ``|| E[b b^T] - I ||_F^2`` from a batch of backward outputs.

    ``"batch"`` is the plug-in value ``|| mean_i b_i b_i^T - I ||_F^2``.  It is
    biased upward by the batch covariance noise, so minimising it shrinks the
    embeddings below unit scale by roughly ``(d + 1) / n``.  ``"pairwise"``
    drops the ``i == j`` terms of the quartic part, which makes it unbiased
    (it can dip below zero on a single batch).
    """
    b = np.asarray(b)
    if b.ndim == 1:
        b = b[None]
    n, d = b.shape
    if estimator == "batch" or n < 2:
        diff = b.T @ b / n - np.eye(d, dtype=b.dtype)
        loss = float(np.sum(diff * diff))
        return (loss, (4.0 / n) * b @ diff) if grad else loss
    if estimator != "pairwise":
        raise ValueError(f"unknown ortho estimator {estimator!r}")
    # sum_{i != j} (b_i . b_j)^2 == ||b^T b||_F^2 - sum_i |b_i|^4
    S = b.T @ b
    sq = np.einsum("ij,ij->i", b, b)
    off = (float(np.sum(S * S)) - float(np.sum(sq * sq))) / (n * (n - 1))
    loss = off - 2.0 * float(np.mean(sq)) + d
    if not grad:
        return loss
    return loss, (4.0 / (n * (n - 1))) * (b @ S - sq[:, None] * b) - (4.0 / n) * b


def _check_finite(loss):
    if not np.isfinite(loss):
        raise FloatingPointError(f"FB loss is not finite ({loss})")


def _bootstrap(params: FBParams, s_next: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``F_target(s', pi_z(s'), z)`` with the greedy action from the online F."""
    a_next = _greedy(_all_action_scores(params, s_next, z), params.cfg.tie_tol)
    return mlp_forward(params.F_target, _f_input(params, s_next, a_next, z))


def fb_loss_and_grad(params: FBParams, batch: FBBatch, goal_emb, z, variant: str | None = None,
                     grad: bool = True):
    """Bellman-residual loss with the constant dropped.

    Returns ``(L_FB, backprop, b_rho)``: ``backprop`` holds the output
    gradients and forward caches of ``F`` and ``B`` (``None`` when
    ``grad=False``) and ``b_rho`` the online backward outputs at the batch's
    state embeddings, which the orthonormality term reuses.
    """
    variant = params.cfg.variant if variant is None else variant
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown FB loss variant {variant!r}")
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    dt = params.F.dtype
    gamma = params.cfg.gamma
    z = _rows(z, params.cfg.d, "z", dt)
    z = np.broadcast_to(z, (n, z.shape[1]))
    s = _rows(batch.s, params.state_dim, "state", dt)
    s_next = _rows(batch.s_next, params.state_dim, "state", dt)

    Fo, f_cache = mlp_forward_cached(params.F, _f_input(params, s, batch.a, z))
    Ft = _bootstrap(params, s_next, z)

    g = _rows(batch.g, params.goal_dim, "goal embedding", dt)
    if variant == "standard":
        g_next = _rows(batch.g_next, params.goal_dim, "goal embedding", dt)
        b_in = np.concatenate([g, g_next])
        Ball, b_cache = mlp_forward_cached(params.B, b_in)
        Bs, Bn = Ball[:n], Ball[n:]
        Bbar = mlp_forward(params.B_target, g)
        pred = Fo @ Bs.T
        tgt = gamma * (Ft @ Bbar.T)
        mask = 1.0 - np.eye(n, dtype=dt)
        cnt = max(n * (n - 1), 1)
        resid = (pred - tgt) * mask
        lin = np.sum(Fo * Bn, axis=1)
        loss = float(np.sum(resid * resid) / cnt - 2.0 * lin.mean())
        _check_finite(loss)
        if not grad:
            return loss, None, Bs
        dpred = 2.0 * resid / cnt
        gF = dpred @ Bs - (2.0 / n) * Bn
        gBs = dpred.T @ Fo
        gBn = -(2.0 / n) * Fo
        gB_all = np.concatenate([gBs, gBn])
    else:
        psi = _rows(goal_emb, params.goal_dim, "goal embedding", dt)[:1]
        b_in = np.concatenate([g, psi])
        Ball, b_cache = mlp_forward_cached(params.B, b_in)
        Bs, bpsi = Ball[:n], Ball[n]
        bbar = mlp_forward(params.B_target, psi)[0]
        q = Fo @ bpsi
        qbar = Ft @ bbar
        r = q - gamma * qbar
        loss = float(np.mean(r * r) - 2.0 * q.mean())
        _check_finite(loss)
        if not grad:
            return loss, None, Bs
        dq = (2.0 * r - 2.0) / n
        gF = dq[:, None] * bpsi[None, :]
        gB_all = np.zeros_like(Ball)
        gB_all[n] = dq @ Fo
    return loss, (gF, f_cache, gB_all, b_cache), Bs


def fb_loss(params: FBParams, batch: FBBatch, goal_emb, z, variant: str | None = None) -> float:
    return fb_loss_and_grad(params, batch, goal_emb, z, variant, grad=False)[0]


def total_loss_and_grad(params: FBParams, batch: FBBatch, goal_emb, z, variant=None):
    """``L_FB + ortho_weight L_norm + proj_weight L_proj`` and gradients for ``params.arrays()``.

    ``L_proj`` regresses the goal projection of the batch's next-state
    embeddings (and the goal) onto the detached backward outputs.
    """
    cfg = params.cfg
    n = len(batch)
    l_fb, cache, Bs = fb_loss_and_grad(params, batch, goal_emb, z, variant)
    gF, f_cache, gB_all, b_cache = cache
    l_norm, g_ortho = ortho_loss(Bs, grad=True, estimator=cfg.ortho_estimator)
    gB_all = gB_all.copy()
    gB_all[:n] += cfg.ortho_weight * g_ortho
    f_grads, _ = mlp_backward(params.F, f_cache, gF)
    b_grads, _ = mlp_backward(params.B, b_cache, gB_all)

    dt = params.proj.dtype
    goals = _rows(batch.g_next, params.goal_dim, "goal embedding", dt)
    if goal_emb is not None:
        goals = np.concatenate([goals, _rows(goal_emb, params.goal_dim, "goal embedding", dt)])
    target = mlp_forward(params.B, goals)
    resid = goals @ params.proj - target
    l_proj = float(np.mean(np.sum(resid * resid, axis=1)))
    g_proj = cfg.proj_weight * goals.T @ (2.0 * resid / len(goals))

    total = l_fb + cfg.ortho_weight * l_norm + cfg.proj_weight * l_proj
    metrics = {"L_FB": l_fb, "L_norm": l_norm, "L_proj": l_proj, "total": total}
    return total, f_grads + b_grads + [g_proj], metrics


def fb_train_step(params: FBParams, batch: FBBatch, goal_emb, rng: np.random.Generator,
                  z=None):
    """One Adam step on the total loss, Polyak update of the targets, freeze at budget."""
    if params.frozen:
        raise FBFrozenError(f"FB parameters are frozen after {params.steps} steps")
    if z is None:
        z = sample_z(params, goal_emb, rng, n=len(batch))
    total, grads, metrics = total_loss_and_grad(params, batch, goal_emb, z)
    params.opt.lr = params.cfg.lr_at(params.steps)
    optimizer_step(params.opt, params.arrays(), grads)
    soft_update(params.target_arrays(), params.online_fb_arrays(), params.cfg.tau)
    params.steps += 1
    if params.steps >= params.cfg.budget:
        params.frozen = True
    return params, metrics


def fb_reward(params: FBParams, s, a, goal_emb) -> np.ndarray | float:
    """``F(s, a, z_goal) . B(goal)`` with ``z_goal`` the goal projection."""
    z = goal_projection(params, goal_emb)
    b = backward_rep(params, goal_emb)
    f = forward_rep(params, s, a, z)
    out = np.asarray(f, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def save_fb(path, params: FBParams) -> None:
    import json
    from pathlib import Path

    from .numcore import save_arrays

    save_arrays(path, params.arrays() + params.target_arrays())
    Path(str(path) + ".json").write_text(json.dumps(params.metadata(), sort_keys=True))


def load_fb(path, cfg: FBConfig) -> FBParams:
    import json
    from pathlib import Path

    from .numcore import load_arrays

    meta = json.loads(Path(str(path) + ".json").read_text())
    params = FBParams.init(cfg, meta["state_dim"], meta["n_actions"], meta["goal_dim"],
                           np.random.default_rng(0))
    arrays = load_arrays(path)
    for dst, src in zip(params.arrays() + params.target_arrays(), arrays):
        dst[...] = src
    params.steps = meta["steps"]
    params.frozen = meta["frozen"]
    return params
