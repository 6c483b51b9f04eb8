"""GoalGrid: image-observation grid navigation with colored targets.

The agent only ever sees the rendered image.  Every target color in the
roster is placed on the grid; the active task names the one to reach.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .oracle import TabularMDP
from .reward_engine import sparse_env_gate


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.STAY: (0, 0),
}

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
AGENT_COLOR = (1.0, 1.0, 1.0)


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class GridConfig:
    side: int = 9
    image_size: int = 24
    tasks: tuple = ("red", "green", "blue")
    max_steps: int = 256
    reward_mode: str = "dense"
    sparse_period: int = 64

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("grid side must be at least 2")
        if self.image_size < self.side:
            raise ValueError("need at least one pixel per cell")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.reward_mode not in ("dense", "sparse"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if len(self.tasks) >= self.side * self.side:
            raise ValueError("too many targets for the grid")
        for t in self.tasks:
            if t not in COLORS:
                raise ValueError(f"unknown target color {t!r}")

    def task_id(self, task: str) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise KeyError(f"task {task!r} not in roster {self.tasks}") from None


@dataclass(frozen=True)
class GridState:
    cfg: GridConfig
    agent: tuple
    targets: dict = field(hash=False)
    task: str
    step: int = 0
    done: bool = False

    @property
    def goal(self) -> tuple:
        return self.targets[self.task]

    @property
    def success(self) -> bool:
        return self.agent == self.goal


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _cell_slices(cfg: GridConfig):
    # nearest-pixel: pixel y belongs to cell y * side // image_size
    owner = (np.arange(cfg.image_size) * cfg.side) // cfg.image_size
    return [slice(int(np.argmax(owner == c)), int(len(owner) - np.argmax(owner[::-1] == c)))
            for c in range(cfg.side)]


_SLICES: dict = {}


def render(state: GridState) -> np.ndarray:
    """3 x H x W image in [0, 1]: black floor, colored targets, white agent."""
    cfg = state.cfg
    key = (cfg.side, cfg.image_size)
    if key not in _SLICES:
        _SLICES[key] = _cell_slices(cfg)
    sl = _SLICES[key]
    img = np.zeros((3, cfg.image_size, cfg.image_size), dtype=np.float32)
    for color, (r, c) in state.targets.items():
        img[:, sl[r], sl[c]] = np.asarray(COLORS[color], dtype=np.float32)[:, None, None]
    r, c = state.agent
    img[:, sl[r], sl[c]] = 1.0
    return img


def env_reset(cfg: GridConfig, task: str, seed, targets: dict | None = None):
    """Place targets and agent; returns ``(state, observation)``.

    ``targets`` pins the target cells (the agent is still placed at random).
    """
    cfg.task_id(task)
    rng = _rng(seed)
    n = cfg.side * cfg.side
    if targets is None:
        cells = rng.choice(n, size=len(cfg.tasks), replace=False)
        targets = {t: divmod(int(c), cfg.side) for t, c in zip(cfg.tasks, cells)}
    taken = {r * cfg.side + c for r, c in targets.values()}
    free = [i for i in range(n) if i not in taken]
    agent = divmod(int(free[rng.integers(len(free))]), cfg.side)
    state = GridState(cfg, agent, dict(targets), task)
    return state, render(state)


def dense_reward(cfg: GridConfig, agent: tuple, goal: tuple) -> float:
    dist = abs(agent[0] - goal[0]) + abs(agent[1] - goal[1])
    return 1.0 - dist / (2 * (cfg.side - 1)) + (1.0 if dist == 0 else 0.0)


def move(cfg: GridConfig, cell: tuple, action) -> tuple:
    dr, dc = MOVES[Action(action)]
    return (min(max(cell[0] + dr, 0), cfg.side - 1), min(max(cell[1] + dc, 0), cfg.side - 1))


def env_step(state: GridState, action):
    """Returns ``(next_state, observation, r_env, done)``."""
    if state.done:
        raise EpisodeFinished("episode already finished; call env_reset")
    cfg = state.cfg
    agent = move(cfg, state.agent, action)
    t = state.step + 1
    success = agent == state.goal
    if cfg.reward_mode == "dense":
        r = dense_reward(cfg, agent, state.goal)
    else:
        r = sparse_env_gate(t, 1.0 if success else 0.0, success, cfg.sparse_period)
    done = success or t >= cfg.max_steps
    nxt = replace(state, agent=agent, step=t, done=done)
    return nxt, render(nxt), float(r), done


def scripted_expert(state: GridState) -> Action:
    """Greedy Manhattan-reducing move, horizontal before vertical, Stay at the goal."""
    (ar, ac), (tr, tc) = state.agent, state.goal
    if tc > ac:
        return Action.RIGHT
    if tc < ac:
        return Action.LEFT
    if tr < ar:
        return Action.UP
    if tr > ar:
        return Action.DOWN
    return Action.STAY


@dataclass
class ExpertEpisode:
    frames: np.ndarray      # (L, 3, H, W)
    task: str
    success: np.ndarray     # (L,) bool


def collect_expert_videos(cfg: GridConfig, n_per_task: int, seed,
                          targets: dict | None = None) -> list[ExpertEpisode]:
    """Scripted-expert rollouts; ``targets`` pins the layout for every episode."""
    if n_per_task < 1:
        raise ValueError("n_per_task must be at least 1")
    rng = _rng(seed)
    episodes = []
    for task in cfg.tasks:
        for _ in range(n_per_task):
            state, obs = env_reset(cfg, task, rng, targets)
            frames, flags = [obs], [state.success]
            while not state.done:
                state, obs, _, _ = env_step(state, scripted_expert(state))
                frames.append(obs)
                flags.append(state.success)
            episodes.append(ExpertEpisode(np.stack(frames), task, np.asarray(flags)))
    return episodes


# -- EXP1 expert dataset ------------------------------------------------------
#
# b"EXP1" | u32 episode count | u32 C, H, W | u32 roster length, then per
# roster entry u32 byte length + UTF-8 name | per episode: u32 task id,
# u32 frame count, frames as little-endian f32 C x H x W blocks, one byte
# per frame of success flags.

def save_expert(path, episodes: list[ExpertEpisode], roster) -> None:
    roster = list(roster)
    c, h, w = episodes[0].frames.shape[1:]
    with open(path, "wb") as fh:
        fh.write(b"EXP1")
        fh.write(struct.pack("<4I", len(episodes), c, h, w))
        fh.write(struct.pack("<I", len(roster)))
        for name in roster:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
        for ep in episodes:
            fh.write(struct.pack("<2I", roster.index(ep.task), len(ep.frames)))
            fh.write(np.ascontiguousarray(ep.frames, dtype="<f4").tobytes())
            fh.write(np.asarray(ep.success, dtype=np.uint8).tobytes())


def load_expert(path) -> tuple[list[ExpertEpisode], list[str]]:
    data = Path(path).read_bytes()
    if data[:4] != b"EXP1":
        raise ValueError(f"{path}: not an EXP1 expert dataset")
    count, c, h, w = struct.unpack_from("<4I", data, 4)
    off = 20
    (n_roster,) = struct.unpack_from("<I", data, off)
    off += 4
    roster = []
    for _ in range(n_roster):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        roster.append(data[off:off + ln].decode("utf-8"))
        off += ln
    episodes = []
    for _ in range(count):
        tid, L = struct.unpack_from("<2I", data, off)
        off += 8
        n = L * c * h * w
        frames = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(L, c, h, w)
        off += 4 * n
        flags = np.frombuffer(data, dtype=np.uint8, count=L, offset=off).astype(bool)
        off += L
        episodes.append(ExpertEpisode(frames.astype(np.float32), roster[tid], flags))
    return episodes, roster


def tabular_from_grid(cfg: GridConfig, task: str, gamma: float,
                      targets: dict | None = None, seed=0) -> TabularMDP:
    """Exact MDP over agent cells with the targets held fixed.

    State index is ``row * side + col``; the active target cell absorbs.  The
    reward table follows ``env_step``: the dense shape in dense mode, the
    success indicator in sparse mode (the step-periodic gate is time-dependent
    and not representable in a stationary table).
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if targets is None:
        targets = env_reset(cfg, task, seed)[0].targets
    goal = targets[task]
    S = cfg.side * cfg.side
    P = np.zeros((S, N_ACTIONS, S))
    R = np.zeros((S, N_ACTIONS))
    g = goal[0] * cfg.side + goal[1]
    for s in range(S):
        cell = divmod(s, cfg.side)
        for a in Action:
            if s == g:
                P[s, a, s] = 1.0
                continue
            nxt = move(cfg, cell, a)
            P[s, a, nxt[0] * cfg.side + nxt[1]] = 1.0
            if cfg.reward_mode == "dense":
                R[s, a] = dense_reward(cfg, nxt, goal)
            else:
                R[s, a] = float(nxt == goal)
    return TabularMDP(P, R, gamma, g)
