"""Frame/task relevance scorer used for goal-frame selection.

Two towers map into a shared embedding space: an MLP over the flattened
frame and a lookup table over task tokens.  The score is their cosine.
The image tower doubles as the goal embedder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Mlp, OptState, ShapeError, mlp_backward, mlp_forward, mlp_forward_cached, optimizer_step


@dataclass(frozen=True)
class ScorerConfig:
    frame_dim: int = 3 * 24 * 24
    embed: int = 64
    hidden: int = 128
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    holdout: float = 0.2


@dataclass
class ScorerParams:
    tower: Mlp
    tokens: np.ndarray          # (n_tokens, embed)
    roster: tuple = ()

    def arrays(self):
        return self.tower.arrays() + [self.tokens]

    @classmethod
    def init(cls, cfg: ScorerConfig, roster, rng: np.random.Generator, dtype=np.float32):
        tower = Mlp.init([cfg.frame_dim, cfg.hidden, cfg.embed], rng, dtype=dtype)
        tokens = rng.standard_normal((len(roster), cfg.embed)).astype(dtype)
        return cls(tower, tokens, tuple(roster))

    def token_index(self, token) -> int:
        if isinstance(token, (int, np.integer)):
            return int(token)
        return self.roster.index(token)


def _flat(params: ScorerParams, frames) -> np.ndarray:
    frames = np.asarray(frames)
    flat = frames.reshape(len(frames), -1)
    if flat.shape[1] != params.tower.in_dim:
        raise ShapeError(f"frame size {flat.shape[1]} does not match tower input {params.tower.in_dim}")
    return flat


def embed_goal(params: ScorerParams, frame) -> np.ndarray:
    """Image-tower embedding of one frame (pre-normalisation)."""
    return embed_frames(params, np.asarray(frame)[None])[0]


def embed_frames(params: ScorerParams, frames) -> np.ndarray:
    return mlp_forward(params.tower, _flat(params, frames))


def _cos_rows(h: np.ndarray, t: np.ndarray) -> np.ndarray:
    nh = np.linalg.norm(h, axis=-1)
    nt = np.linalg.norm(t, axis=-1)
    denom = nh * nt
    out = np.where(denom < 1e-12, 0.0, np.sum(h * t, axis=-1) / np.maximum(denom, 1e-30))
    return np.clip(out, -1.0, 1.0)


def score_frames(params: ScorerParams, frames, token) -> np.ndarray:
    h = embed_frames(params, frames).astype(np.float64)
    t = params.tokens[params.token_index(token)].astype(np.float64)
    return _cos_rows(h, t[None, :])


def score_frame(params: ScorerParams, frame, token) -> float:
    return float(score_frames(params, np.asarray(frame)[None], token)[0])


def select_from_scores(scores) -> int:
    """Index of the best score; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("no frames to select from")
    return int(np.argmax(scores))


def select_goal_frame(params: ScorerParams, frames, token):
    """Returns ``(index, frame)`` of the highest-scoring frame."""
    if len(frames) == 0:
        raise ValueError("no frames to select from")
    idx = select_from_scores(score_frames(params, frames, token))
    return idx, frames[idx]


def scorer_loss(params: ScorerParams, frames, tokens, labels, grad: bool = True):
    """Class-balanced squared error between ``(score + 1) / 2`` and the 0/1 label."""
    x = _flat(params, frames).astype(params.tower.dtype, copy=False)
    tokens = np.asarray(tokens, dtype=int)
    y = np.asarray(labels, dtype=params.tower.dtype)
    h, cache = mlp_forward_cached(params.tower, x)
    t = params.tokens[tokens]
    nh = np.linalg.norm(h, axis=1, keepdims=True) + 1e-12
    nt = np.linalg.norm(t, axis=1, keepdims=True) + 1e-12
    hu, tu = h / nh, t / nt
    s = np.sum(hu * tu, axis=1)
    p = 0.5 * (s + 1.0)
    pos = y > 0.5
    w = np.where(pos, 0.5 / max(pos.sum(), 1), 0.5 / max((~pos).sum(), 1))
    if pos.all() or (~pos).all():
        w = np.full(len(y), 1.0 / len(y))
    err = p - y
    loss = float(np.sum(w * err * err))
    if not grad:
        return loss, None
    g_s = (w * err)[:, None]          # d/ds of w (p - y)^2 = 2 w err * 0.5
    g_h = g_s * (tu - s[:, None] * hu) / nh
    g_t = g_s * (hu - s[:, None] * tu) / nt
    tower_grads, _ = mlp_backward(params.tower, cache, g_h)
    tok_grad = np.zeros_like(params.tokens)
    np.add.at(tok_grad, tokens, g_t)
    return loss, tower_grads + [tok_grad]


def _split(episodes, holdout: float, rng):
    order = rng.permutation(len(episodes))
    n_hold = int(round(holdout * len(episodes)))
    return [episodes[i] for i in order[n_hold:]], [episodes[i] for i in order[:n_hold]]


def selection_accuracy(params: ScorerParams, episodes) -> float:
    """Fraction of episodes whose selected frame is flagged as a success."""
    if not episodes:
        return float("nan")
    hits = [bool(ep.success[select_goal_frame(params, ep.frames, ep.task)[0]]) for ep in episodes]
    return float(np.mean(hits))


def train_scorer(episodes, cfg: ScorerConfig, seed: int, roster=None, steps: int | None = None):
    """Fit both towers on expert frames labelled by their success flags.

    Returns ``(params, report)``; the report carries held-out frame accuracy
    and held-out selection accuracy.
    """
    roster = tuple(roster) if roster is not None else tuple(dict.fromkeys(ep.task for ep in episodes))
    flags = np.concatenate([ep.success for ep in episodes])
    if flags.all() or not flags.any():
        raise ValueError("scorer training needs both success and non-success frames")
    rng = np.random.default_rng(seed)
    train, held = _split(episodes, cfg.holdout, rng)
    frames = np.concatenate([ep.frames for ep in train]).reshape(-1, cfg.frame_dim)
    tokens = np.concatenate([[roster.index(ep.task)] * len(ep.frames) for ep in train])
    labels = np.concatenate([ep.success for ep in train]).astype(np.float32)
    pos_idx = np.flatnonzero(labels > 0.5)
    neg_idx = np.flatnonzero(labels < 0.5)
    params = ScorerParams.init(cfg, roster, rng)
    arrays = params.arrays()
    opt = OptState("adam", lr=cfg.lr)
    trace = []
    half = cfg.batch_size // 2
    for _ in range(cfg.steps if steps is None else steps):
        # half positives, half negatives per batch
        idx = np.concatenate([rng.choice(pos_idx, half), rng.choice(neg_idx, cfg.batch_size - half)])
        loss, grads = scorer_loss(params, frames[idx], tokens[idx], labels[idx])
        optimizer_step(opt, arrays, grads)
        trace.append(loss)
    report = {"final_loss": float(np.mean(trace[-50:])) if trace else float("nan")}
    if held:
        hy = np.concatenate([ep.success for ep in held])
        hs = np.concatenate([score_frames(params, ep.frames, ep.task) for ep in held])
        report["heldout_frame_accuracy"] = float(np.mean((hs > 0) == hy))
        report["heldout_selection_accuracy"] = selection_accuracy(params, held)
        report["heldout_score_gap"] = float(hs[hy].mean() - hs[~hy].mean())
        report["heldout_episodes"] = len(held)
    return params, report


def save_scorer(path, params: ScorerParams) -> None:
    from .numcore import save_arrays

    save_arrays(path, params.arrays())


def load_scorer(path, cfg: ScorerConfig, roster) -> ScorerParams:
    from .numcore import load_arrays

    params = ScorerParams.init(cfg, roster, np.random.default_rng(0))
    arrays = load_arrays(path)
    n = len(params.tower.arrays())
    params.tower.load_arrays(arrays[:n])
    params.tokens[...] = arrays[n]
    return params
