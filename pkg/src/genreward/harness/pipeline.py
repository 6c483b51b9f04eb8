"""End-to-end training pipeline and the run directory it writes.

Stages run in a fixed order: expert data, autoencoder, scorer, latent
dataset, diffusion, random warmup, agent loop.  Each pretraining stage first
looks for its artifact in the run directory and then in ``run.pretrained``;
only missing artifacts are trained.  Metrics rows hold no wall-clock values,
so two runs with the same config produce byte-identical ``metrics.jsonl``;
timings go to ``timing.json``.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import agent as ag
from ..fb_rep import FBBatch, FBParams, fb_reward, fb_train_step, save_fb
from ..frame_scorer import (
    ScorerParams, embed_frames, embed_goal, load_scorer, save_scorer, select_goal_frame, train_scorer,
)
from ..goal_diffusion import (
    DiffusionConfig, load_denoiser, make_schedule, sample_goal_video, save_denoiser, train_diffusion,
)
from ..gridworld import N_ACTIONS, collect_expert_videos, env_reset, env_step, load_expert, save_expert
from ..numcore import load_arrays, one_hot, save_arrays
from ..reward_engine import gated_reward, video_level_reward
from ..seq_encoder import (
    decode_video, encode_frames, encode_video, load_encoder, save_encoder, train_autoencoder,
    uniform_sample_frames,
)
from .config import RunConfig, emit_config

log = logging.getLogger("genreward")

METRICS_VERSION = 1
PRETRAIN_FILES = ("expert.exp1", "encoder.nnp", "scorer.nnp", "latents.nnp", "denoiser.nnp")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Pretrained:
    episodes: list
    roster: tuple
    encoder: object
    scorer: ScorerParams
    denoiser: object
    schedule: object


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _locate(cfg: RunConfig, out: Path, name: str) -> Path | None:
    for base in (out, Path(cfg.run.pretrained) if cfg.run.pretrained else None):
        if base is not None and (base / name).exists():
            return base / name
    return None


class _Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def run(self, stage: str, fn, *args):
        t0 = time.perf_counter()
        log.info("stage %s: start", stage)
        try:
            result = fn(*args)
        except StageFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - recorded with the stage name
            raise StageFailure(stage, exc) from exc
        self.stages[stage] = round(time.perf_counter() - t0, 3)
        log.info("stage %s: done in %.1fs", stage, self.stages[stage])
        return result


def diffusion_config(cfg: RunConfig, n_tokens: int) -> DiffusionConfig:
    d, e = cfg.diffusion, cfg.encoder
    return DiffusionConfig(
        latent_shape=e.latent_shape, first_dim=int(np.prod(e.frame_latent_shape)), n_tokens=n_tokens,
        T=d.T, t_embed=d.t_embed, token_embed=d.token_embed, image_embed=d.image_embed,
        hidden=d.hidden, layers=d.layers, parameterization=d.parameterization,
        steps=d.steps, batch_size=d.batch_size, lr=d.lr)


# -- pretraining stages ---------------------------------------------------------

def stage_expert(cfg: RunConfig, out: Path):
    found = _locate(cfg, out, "expert.exp1")
    if found:
        episodes, roster = load_expert(found)
        return episodes, tuple(roster)
    grid = cfg.grid()
    episodes = collect_expert_videos(grid, cfg.expert.n_per_task, cfg.run.seed, _layout(cfg, grid))
    save_expert(out / "expert.exp1", episodes, grid.tasks)
    return episodes, tuple(grid.tasks)


def stage_encoder(cfg: RunConfig, out: Path, episodes):
    found = _locate(cfg, out, "encoder.nnp")
    if found:
        return load_encoder(found, cfg.encoder)
    frames = np.concatenate([ep.frames for ep in episodes])
    params, trace = train_autoencoder(frames, cfg.encoder, cfg.run.seed + 1)
    save_encoder(out / "encoder.nnp", params)
    log.info("autoencoder final loss %.5f", float(np.mean(trace[-50:])))
    return params


def stage_scorer(cfg: RunConfig, out: Path, episodes, roster):
    found = _locate(cfg, out, "scorer.nnp")
    if found:
        return load_scorer(found, cfg.scorer, roster)
    params, report = train_scorer(episodes, cfg.scorer, cfg.run.seed + 2, roster)
    save_scorer(out / "scorer.nnp", params)
    (out / "scorer_report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    log.info("scorer report %s", report)
    return params


def latent_dataset(encoder, episodes, roster):
    """``(latent videos, token ids, first-frame latents)`` for every expert episode."""
    lat = np.stack([encode_video(encoder, uniform_sample_frames(ep.frames)) for ep in episodes])
    first = np.stack([encode_frames(encoder, ep.frames[:1])[0] for ep in episodes])
    tokens = np.array([roster.index(ep.task) for ep in episodes], dtype=np.float32)
    return lat.astype(np.float32), tokens, first.astype(np.float32)


def stage_latents(cfg: RunConfig, out: Path, encoder, episodes, roster):
    found = _locate(cfg, out, "latents.nnp")
    if found:
        lat, tokens, first = load_arrays(found)
        return lat, tokens.astype(int), first
    lat, tokens, first = latent_dataset(encoder, episodes, roster)
    save_arrays(out / "latents.nnp", [lat, tokens, first])
    return lat, tokens.astype(int), first


def stage_diffusion(cfg: RunConfig, out: Path, latents, roster):
    dcfg = diffusion_config(cfg, len(roster))
    schedule = make_schedule(dcfg.T)
    found = _locate(cfg, out, "denoiser.nnp")
    if found:
        return load_denoiser(found, dcfg), schedule
    lat, tokens, first = latents
    params, schedule, trace = train_diffusion(lat, tokens, first, dcfg, cfg.run.seed + 3, schedule)
    save_denoiser(out / "denoiser.nnp", params)
    log.info("diffusion final loss %.5f", float(np.mean(trace[-100:])))
    return params, schedule


def pretrain(cfg: RunConfig, out, timer: _Timer | None = None) -> Pretrained:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timer = timer or _Timer()
    episodes, roster = timer.run("expert", stage_expert, cfg, out)
    encoder = timer.run("encoder", stage_encoder, cfg, out, episodes)
    scorer = timer.run("scorer", stage_scorer, cfg, out, episodes, roster)
    latents = timer.run("latents", stage_latents, cfg, out, encoder, episodes, roster)
    denoiser, schedule = timer.run("diffusion", stage_diffusion, cfg, out, latents, roster)
    return Pretrained(episodes, roster, encoder, scorer, denoiser, schedule)


# -- goal generation ------------------------------------------------------------

@dataclass
class Goal:
    latent: np.ndarray      # generated latent video
    frame_index: int
    frame: np.ndarray
    embedding: np.ndarray   # scorer image-tower embedding of the selected frame


def generate_goal(pre: Pretrained, task: str, first_obs: np.ndarray, rng) -> Goal:
    """Sample a goal video from the first observation and pick its best frame for ``task``."""
    token = pre.roster.index(task)
    first_lat = encode_frames(pre.encoder, np.asarray(first_obs)[None])[0]
    latent = sample_goal_video(pre.denoiser, pre.schedule, token, first_lat, rng)
    frames = np.clip(decode_video(pre.encoder, latent), 0.0, 1.0)
    idx, frame = select_goal_frame(pre.scorer, frames, task)
    return Goal(latent, idx, frame, embed_goal(pre.scorer, frame))


# -- agent loop -----------------------------------------------------------------

def latent_stats(encoder, episodes, max_episodes: int = 64) -> tuple[np.ndarray, float]:
    """Per-feature mean and one global scale of frame latents over expert frames.

    Raw latents run to tens of units, which left the Q-network's greedy
    policy collapsing on most seeds; centring and one shared scale keeps the
    latent geometry while bringing inputs to unit size.
    """
    stride = max(1, len(episodes) // max_episodes)
    frames = np.concatenate([ep.frames for ep in episodes[::stride]])
    z = ag.encode_state(encoder, frames).astype(np.float64)
    mean = z.mean(axis=0)
    scale = float(np.sqrt(np.mean((z - mean) ** 2)))
    return mean.astype(np.float32), max(scale, 1e-6)


class _Observer:
    """State vector (standardised frozen AE latent plus task one-hot) and goal-space embedding."""

    def __init__(self, pre: Pretrained, roster, stats: tuple | None = None):
        self.pre = pre
        self.roster = tuple(roster)
        self.mean, self.scale = stats if stats is not None else latent_stats(pre.encoder, pre.episodes)

    def save_stats(self, path: Path):
        save_arrays(path, [self.mean, np.array([self.scale], dtype=np.float32)])

    @staticmethod
    def load_stats(path: Path) -> tuple:
        mean, scale = load_arrays(path)
        return mean, float(scale[0])

    def state(self, obs, task) -> np.ndarray:
        z = (ag.encode_state(self.pre.encoder, obs) - self.mean) / np.float32(self.scale)
        return np.concatenate([z, one_hot(self.roster.index(task), len(self.roster))])

    def goal_emb(self, obs) -> np.ndarray:
        return embed_frames(self.pre.scorer, np.asarray(obs)[None])[0]


def _jsonable(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, (np.floating, float)):
            v = float(v)
            out[k] = v if np.isfinite(v) else None
        elif isinstance(v, np.integer):
            out[k] = int(v)
        elif isinstance(v, np.bool_):
            out[k] = bool(v)
        else:
            out[k] = v
    return out


class MetricsWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")
        self.last_step = None

    def write(self, row: dict):
        step = row["step"]
        if self.last_step is not None and step <= self.last_step:
            raise RuntimeError(f"metrics step {step} not after {self.last_step}")
        self.last_step = step
        self.fh.write(json.dumps(_jsonable({"v": METRICS_VERSION, **row}), sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if row.get("v") != METRICS_VERSION:
                    raise ValueError(f"unsupported metrics schema {row.get('v')!r}")
                rows.append(row)
    return rows


def _layout(cfg: RunConfig, grid):
    if not cfg.env.fixed_layout:
        return None
    return env_reset(grid, grid.tasks[0], cfg.env.layout_seed)[0].targets


def _fb_batch(buf: ag.ReplayBuffer, idx) -> FBBatch:
    ex = buf.extras
    return FBBatch(ex["s"][idx], buf.action[idx], ex["s_next"][idx], ex["g"][idx], ex["g_next"][idx])


def _q_batch(buf: ag.ReplayBuffer, idx):
    ex = buf.extras
    return ex["s"][idx], buf.action[idx], buf.reward[idx], ex["s_next"][idx], buf.done[idx]


def run_agent(cfg: RunConfig, out: Path, pre: Pretrained, timer: _Timer) -> dict:
    grid = cfg.grid()
    rcfg = cfg.reward
    qcfg = cfg.agent.q()
    rng_env, rng_act, rng_q, rng_fb, rng_goal, rng_warm = _seeds(cfg.run.seed, 6)
    roster = pre.roster
    obs_fn = _Observer(pre, roster)
    obs_fn.save_stats(out / "state_norm.nnp")
    targets = _layout(cfg, grid)
    uses_intrinsic = rcfg.variant != "env-only"
    state_dim = int(np.prod(cfg.encoder.frame_latent_shape)) + len(roster)
    q = ag.QParams.init(state_dim, N_ACTIONS, qcfg, rng_q)
    fb = None
    if rcfg.uses_fb:
        fb = FBParams.init(cfg.fb, state_dim, N_ACTIONS, cfg.scorer.embed, rng_fb)
    buf = ag.ReplayBuffer(cfg.agent.capacity, (3, grid.image_size, grid.image_size), N_ACTIONS)

    def new_episode(rng):
        task = roster[int(rng.integers(len(roster)))]
        st, ob = env_reset(grid, task, rng, targets)
        return st, ob, obs_fn.state(ob, task), obs_fn.goal_emb(ob)

    def push(ob, a, r, ob2, done, t, s, s2, g, g2):
        ag.replay_push(buf, ag.Transition(ob, a, r, ob2, done, t), s=s, s_next=s2, g=g, g_next=g2)

    # (b) random-agent warmup buffer, raw env rewards
    def warmup():
        st, ob, s, g = new_episode(rng_warm)
        for _ in range(cfg.agent.warmup):
            a = int(rng_warm.integers(N_ACTIONS))
            st2, ob2, r_env, done = env_step(st, a)
            s2, g2 = obs_fn.state(ob2, st2.task), obs_fn.goal_emb(ob2)
            push(ob, a, r_env, ob2, st2.success, st2.step, s, s2, g, g2)
            if done:
                st, ob, s, g = new_episode(rng_warm)
            else:
                st, ob, s, g = st2, ob2, s2, g2

    timer.run("warmup", warmup)
    fb_snapshot = None
    if fb is not None and cfg.fb.random_only:
        fb_snapshot = len(buf)

    writer = MetricsWriter(out / "metrics.jsonl")
    writer.write({"step": 0, "event": "warmup", "buffer": len(buf), "seed": cfg.run.seed,
                  "variant": rcfg.variant})
    summary = {"episodes": 0, "successes": 0, "intrinsic_calls": 0}

    def loop():
        goal = None
        episode = 0
        st, ob, s, g = new_episode(rng_env)
        history = [ob]
        if uses_intrinsic:
            goal = generate_goal(pre, st.task, ob, rng_goal)
        ep_ret = ep_env = 0.0
        td_acc, td_n = 0.0, 0
        fb_metrics, fb_logged = None, -1
        total = cfg.run.total_steps
        for step in range(1, total + 1):
            eps = ag.epsilon_at(step - 1, total, qcfg)
            a = ag.act_epsilon_greedy(q, s, eps, rng_act)
            st2, ob2, r_env, done = env_step(st, a)
            history.append(ob2)
            s_now, a_now = s, a

            def provider():
                summary["intrinsic_calls"] += 1
                r_video = r_fb = None
                if rcfg.uses_video:
                    hist = history if cfg.run.history_window <= 0 else history[-cfg.run.history_window:]
                    r_video = video_level_reward(pre.encoder, hist, goal.latent)
                if rcfg.uses_fb:
                    r_fb = fb_reward(fb, s_now, a_now, goal.embedding)
                return r_video, r_fb

            bd = gated_reward(st2.step, r_env, provider, rcfg)
            s2, g2 = obs_fn.state(ob2, st2.task), obs_fn.goal_emb(ob2)
            push(ob, a, bd.r_emitted, ob2, st2.success, st2.step, s, s2, g, g2)
            ep_ret += bd.r_emitted
            ep_env += r_env

            if fb is not None and not fb.frozen and step % cfg.run.fb_every == 0:
                hi = fb_snapshot if fb_snapshot is not None else len(buf)
                idx = rng_fb.integers(hi, size=cfg.fb.batch_size)
                _, fb_metrics = fb_train_step(fb, _fb_batch(buf, idx), goal.embedding, rng_fb)
                if not np.isfinite(fb_metrics["total"]):
                    raise FloatingPointError("FB loss is not finite")
            if step % cfg.agent.update_every == 0:
                idx = ag.replay_sample(buf, qcfg.batch_size, rng_q)
                _, td = ag.q_update(q, _q_batch(buf, idx), qcfg.gamma, tau=qcfg.tau)
                td_acc += td
                td_n += 1
            if step % 1000 == 0 and not np.all(np.isfinite(ag.q_values(q, s2))):
                raise FloatingPointError(f"Q values not finite at step {step}")

            row = {}
            if bd.gate:
                row.update(bd.to_row())
            if fb is not None and fb_metrics is not None and fb.steps != fb_logged and (
                    fb.steps % cfg.run.fb_log_every == 0 or fb.frozen):
                fb_logged = fb.steps
                row.update({"fb_steps": fb.steps, "fb_frozen": fb.frozen, "L_FB": fb_metrics["L_FB"],
                            "L_norm": fb_metrics["L_norm"], "L_proj": fb_metrics["L_proj"],
                            "fb_total": fb_metrics["total"]})
            if done:
                row.update({"event": "episode", "episode": episode, "t": st2.step, "gate": bd.gate,
                            "episode_return": ep_ret, "env_return": ep_env, "success": st2.success,
                            "length": st2.step, "epsilon": eps,
                            "td_loss": td_acc / td_n if td_n else None})
                summary["episodes"] += 1
                summary["successes"] += int(st2.success)
            if row:
                row.setdefault("episode", episode)
                row.setdefault("t", st2.step)
                row.setdefault("gate", bd.gate)
                writer.write({"step": step, **row})

            if done:
                episode += 1
                ep_ret = ep_env = 0.0
                td_acc, td_n = 0.0, 0
                st, ob, s, g = new_episode(rng_env)
                history = [ob]
                if uses_intrinsic and (goal is None or cfg.run.goal_refresh == "episode"):
                    goal = generate_goal(pre, st.task, ob, rng_goal)
            else:
                st, ob, s, g = st2, ob2, s2, g2
        return goal

    try:
        goal = timer.run("agent", loop)
    finally:
        writer.close()
    ag.save_q(out / "q.nnp", q)
    if fb is not None:
        save_fb(out / "fb.nnp", fb)
    if goal is not None:
        from ..seq_encoder import save_latent
        save_latent(out / "goal.gvd1", goal.latent)
    return summary


def run_pipeline(cfg: RunConfig, out) -> Path:
    """Train every stage and the agent; returns the run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg), encoding="utf-8")
    timer = _Timer()
    t0 = time.perf_counter()
    try:
        pre = pretrain(cfg, out, timer)
        summary = run_agent(cfg, out, pre, timer)
    except StageFailure as exc:
        (out / "failure.json").write_text(json.dumps({"stage": exc.stage, "error": str(exc.cause)}) + "\n")
        raise
    finally:
        timing = {"stages": timer.stages, "total": round(time.perf_counter() - t0, 3)}
        (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return out


def copy_pretrained(src, dst) -> None:
    """Copy stage artifacts from one run directory into another."""
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name in PRETRAIN_FILES:
        if (src / name).exists():
            shutil.copyfile(src / name, dst / name)


__all__ = [
    "StageFailure", "Pretrained", "Goal", "pretrain", "generate_goal", "run_agent", "run_pipeline",
    "read_metrics", "MetricsWriter", "latent_dataset", "diffusion_config", "copy_pretrained",
    "METRICS_VERSION",
]
