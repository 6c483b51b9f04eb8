"""FB fidelity check against the exact successor measure of a tabular MDP."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..fb_rep import FBBatch, FBConfig, FBParams, fb_train_step
from ..oracle import TabularMDP, fb_fidelity
from ..reward_engine import VARIANTS

# Settings that reach the fidelity thresholds on the 8-state chain and the
# 4x4 grid well inside the step budget.
ORACLE_FB = FBConfig(variant="standard", gamma=0.9, d=16, hidden=128, lr=1e-3, tau=0.01,
                     budget=15_000, batch_size=256, p_goal=0.5, tie_tol=0.02)


def exhaustive_transitions(mdp: TabularMDP):
    """All ``(s, a, s')`` of a deterministic MDP (most likely successor otherwise)."""
    S, A = mdp.n_states, mdp.n_actions
    s = np.repeat(np.arange(S), A)
    a = np.tile(np.arange(A), S)
    s_next = np.argmax(mdp.P.reshape(S * A, S), axis=1)
    return s, a, s_next


def train_tabular_fb(mdp: TabularMDP, cfg: FBConfig, seed: int = 0, steps: int | None = None,
                     callback=None) -> FBParams:
    """Fit FB on uniform draws over every state-action pair with one-hot embeddings."""
    if cfg.gamma != mdp.gamma:
        cfg = replace(cfg, gamma=mdp.gamma)
    S, A = mdp.n_states, mdp.n_actions
    eye = np.eye(S, dtype=np.float32)
    rng = np.random.default_rng(seed)
    params = FBParams.init(cfg, S, A, S, rng)
    s_all, a_all, sn_all = exhaustive_transitions(mdp)
    goal = eye[mdp.goal]
    steps = cfg.budget if steps is None else min(steps, cfg.budget)
    for k in range(steps):
        i = rng.integers(S * A, size=cfg.batch_size)
        s, sn = eye[s_all[i]], eye[sn_all[i]]
        _, metrics = fb_train_step(params, FBBatch(s, a_all[i], sn, s, sn), goal, rng)
        if callback is not None:
            callback(k + 1, params, metrics)
    return params


def run_oracle_check(mdp, fb_cfg: FBConfig | None = None, seed: int = 0, steps: int | None = None,
                     max_rel_err: float = 0.15, min_pearson: float = 0.9) -> dict:
    """Train standard-fb on ``mdp`` (a TabularMDP or a JSON path) and score it against the oracle."""
    if not isinstance(mdp, TabularMDP):
        mdp = TabularMDP.from_json(Path(mdp).read_text(encoding="utf-8"))
    cfg = fb_cfg if fb_cfg is not None else ORACLE_FB
    if cfg.variant != "standard":
        cfg = replace(cfg, variant="standard")
    t0 = time.perf_counter()
    params = train_tabular_fb(mdp, cfg, seed, steps)
    S = mdp.n_states
    eye = np.eye(S, dtype=np.float32)
    fid = fb_fidelity(params, mdp, lambda s: eye[s], lambda s: eye[s], np.full(S, 1.0 / S))
    report = dict(fid)
    report.update({
        "states": S, "actions": mdp.n_actions, "gamma": mdp.gamma, "goal": mdp.goal,
        "fb_steps": params.steps, "seconds": round(time.perf_counter() - t0, 2),
        "max_rel_err": max_rel_err, "min_pearson": min_pearson,
    })
    report["passed"] = bool(fid["mean_rel_err"] < max_rel_err and fid["pearson"] > min_pearson)
    return report


def run_ablation(cfg, out, seeds, variants=VARIANTS, last: int = 100) -> dict:
    """Train every reward variant at every seed on one shared pretraining.

    Returns ``{"success": {variant: [rate per seed]}, "median": {...},
    "seconds": float}`` where a rate is the success fraction over the final
    ``last`` training episodes.
    """
    from .config import apply_overrides
    from .pipeline import pretrain
    from .report import success_rate_last
    from .sweep import run_set

    out = Path(out)
    t0 = time.perf_counter()
    if not cfg.run.pretrained:
        pretrain(cfg, out / "pretrained")
        cfg = apply_overrides(cfg, {"run.pretrained": str(out / "pretrained")})
    success = {}
    for variant in variants:
        runs = run_set(cfg, out / variant, seeds, {"reward.variant": variant}, share_pretrained=False)
        success[variant] = [success_rate_last(r, last) for r in runs]
    return {"success": success,
            "median": {v: float(np.median(r)) for v, r in success.items()},
            "seconds": round(time.perf_counter() - t0, 1)}
