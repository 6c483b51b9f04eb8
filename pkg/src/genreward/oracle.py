"""Exact finite-MDP machinery: successor measures, value iteration, FB fidelity.

Everything here is dense float64 linear algebra; state counts stay in the
hundreds at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class TabularMDP:
    P: np.ndarray          # (S, A, S), row-stochastic
    R: np.ndarray          # (S, A)
    gamma: float
    goal: int | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {self.P.shape}")
        if self.R.shape != self.P.shape[:2]:
            raise ValueError(f"reward table must be {self.P.shape[:2]}, got {self.R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(-1) - 1)) > 1e-9:
            raise ValueError("transition rows must be probability distributions")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "states": self.n_states,
            "actions": self.n_actions,
            "P": self.P.tolist(),
            "R": self.R.tolist(),
            "gamma": self.gamma,
            "goal": self.goal,
        })

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        d = json.loads(text)
        P = np.asarray(d["P"], dtype=np.float64)
        if P.shape[:2] != (d["states"], d["actions"]):
            raise ValueError("declared sizes disagree with the transition tensor")
        return cls(P, np.asarray(d["R"]), float(d["gamma"]), d.get("goal"))


def chain_mdp(n: int = 8, gamma: float = 0.9, goal: int | None = None,
              n_actions: int = 5) -> TabularMDP:
    """A 1 x n strip with the gridworld's action set (Up, Down, Left, Right, Stay).

    Up/Down bump into the walls; the goal (default: right end) absorbs.
    """
    goal = n - 1 if goal is None else goal
    moves = [0, 0, -1, 1, 0][:n_actions]
    P = np.zeros((n, n_actions, n))
    R = np.zeros((n, n_actions))
    for s in range(n):
        for a, dm in enumerate(moves):
            if s == goal:
                P[s, a, s] = 1.0
                continue
            nxt = min(max(s + dm, 0), n - 1)
            P[s, a, nxt] = 1.0
            R[s, a] = float(nxt == goal)
    return TabularMDP(P, R, gamma, goal)


def policy_matrix(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """Deterministic action table (S,) -> distribution rows (S, A)."""
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def successor_measure(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """M[s, a, s'] = sum_t gamma^t Pr(s_{t+1} = s' | s_0 = s, a_0 = a, pi).

    Occupancy counts from ``s_{t+1}`` onward, i.e. ``M = P (I - gamma P_pi)^-1``.
    """
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must be {(mdp.n_states, mdp.n_actions)}, got {pi.shape}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(-1) - 1)) > 1e-9:
        raise ValueError("policy rows must be probability distributions")
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    # M_flat = P_flat @ inv(A)  <=>  A^T M_flat^T = P_flat^T
    P_flat = mdp.P.reshape(-1, mdp.n_states)
    try:
        M = np.linalg.solve(A.T, P_flat.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular occupancy system") from exc
    return M.reshape(mdp.n_states, mdp.n_actions, mdp.n_states)


def goal_q(mdp: TabularMDP, values: np.ndarray, goal: int) -> np.ndarray:
    """One Bellman backup for reward 1 on entering ``goal`` (absorbing, no reward after)."""
    cont = values.copy()
    cont[goal] = 0.0
    enter = np.zeros(mdp.n_states)
    enter[goal] = 1.0
    return mdp.P @ (enter + mdp.gamma * cont)


def value_iteration(mdp: TabularMDP, goal: int, tol: float = 1e-10,
                    max_sweeps: int = 100_000):
    """Optimal goal-reaching values and greedy policy.

    Returns ``(values, policy, sweep_diffs)``; ``policy`` breaks ties toward the
    lowest action index and the goal's own value is 0.
    """
    if not 0 <= goal < mdp.n_states:
        raise ValueError(f"goal {goal} out of range")
    V = np.zeros(mdp.n_states)
    diffs = []
    for _ in range(max_sweeps):
        Q = goal_q(mdp, V, goal)
        new = Q.max(axis=1)
        new[goal] = 0.0
        diff = float(np.max(np.abs(new - V)))
        diffs.append(diff)
        V = new
        if diff < tol:
            break
    policy = np.argmax(goal_q(mdp, V, goal), axis=1)
    return V, policy, diffs


def analytic_fb(mdp: TabularMDP, goal: int, dtype=np.float64):
    """Exact full-rank FB factorization for one goal, as an ``FBParams``.

    States and goals are one-hot, ``rho`` is uniform and ``d = |S|``.  ``B`` is
    the identity, ``z`` is ``sqrt(d) e_goal`` and ``F`` is a two-layer ReLU
    table lookup holding ``M^pi / rho`` for a policy that is greedy with
    respect to its own occupancy of the goal (found by policy iteration), so
    ``policy_z`` reproduces the policy the table was built from.
    """
    from .fb_rep import FBConfig, FBParams
    from .numcore import Mlp

    from .fb_rep import goal_projection, policy_z

    S, A = mdp.n_states, mdp.n_actions
    rho = 1.0 / S
    d = S
    # hidden unit (s, a) fires iff both one-hots are set: relu(x_s + x_a - 1)
    W1 = np.zeros((S + A + d, S * A))
    b1 = -np.ones(S * A)
    for s in range(S):
        for a in range(A):
            W1[s, s * A + a] = 1.0
            W1[S + a, s * A + a] = 1.0
    B = Mlp([np.eye(S, dtype=dtype)], [np.zeros(S, dtype=dtype)], [])
    cfg = FBConfig(d=d, gamma=mdp.gamma, variant="standard")
    eye = np.eye(S, dtype=dtype)

    _, actions, _ = value_iteration(mdp, goal)
    for _ in range(100):
        M = successor_measure(mdp, policy_matrix(actions, A))
        F = Mlp([W1.astype(dtype), (M / rho).reshape(S * A, S).astype(dtype)],
                [b1.astype(dtype), np.zeros(S, dtype=dtype)], ["relu"])
        params = FBParams.from_networks(cfg, F, B, state_dim=S, n_actions=A,
                                        goal_dim=S, proj=eye)
        # iterate to the policy that the built table itself selects
        induced = policy_z(params, eye, goal_projection(params, eye[goal]))
        if np.array_equal(induced, actions):
            return params
        actions = induced
    raise RuntimeError("analytic FB construction did not reach a fixed point")


def fb_fidelity(fb_params, mdp: TabularMDP, state_embedder, goal_embedder,
                rho: np.ndarray, goals=None) -> dict:
    """Compare ``F(s,a,z)^T B(g(s'))`` with ``M^{pi_z}(s,a,s') / rho(s')``.

    ``z`` is the goal projection of each tested goal's embedding and ``pi_z``
    the greedy FB policy, so the oracle measure is taken under the policy the
    representation itself induces.  ``mean_rel_err`` is the relative L1 error
    ``sum |pred - true| / sum |true|`` over all triples.
    """
    from .fb_rep import backward_rep, forward_rep, goal_projection, policy_z

    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (mdp.n_states,) or np.any(rho <= 0):
        raise ValueError("rho must be a strictly positive distribution over states")
    goals = [mdp.goal] if goals is None else list(goals)
    S, A = mdp.n_states, mdp.n_actions
    states = np.stack([state_embedder(s) for s in range(S)])
    goal_embs = np.stack([goal_embedder(s) for s in range(S)])
    Bs = backward_rep(fb_params, goal_embs).astype(np.float64)      # (S, d)
    preds, trues = [], []
    for g in goals:
        psi = goal_embedder(g)
        z = goal_projection(fb_params, psi)
        actions = policy_z(fb_params, states, z)
        M = successor_measure(mdp, policy_matrix(actions, A))
        s_rep = np.repeat(states, A, axis=0)
        a_rep = np.tile(np.arange(A), S)
        Fsa = forward_rep(fb_params, s_rep, a_rep, z).astype(np.float64)  # (S*A, d)
        preds.append((Fsa @ Bs.T).reshape(S, A, S))
        trues.append(M / rho[None, None, :])
    pred = np.stack(preds).reshape(-1)
    true = np.stack(trues).reshape(-1)
    err = np.abs(pred - true)
    denom = np.abs(true).sum()
    if pred.std() < 1e-12 or true.std() < 1e-12:
        pearson = 0.0
    else:
        pearson = float(np.corrcoef(pred, true)[0, 1])
    return {
        "max_abs_err": float(err.max()),
        "mean_rel_err": float(err.sum() / denom) if denom > 0 else float("inf"),
        "pearson": pearson,
    }
