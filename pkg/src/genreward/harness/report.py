"""Seed-aggregated learning curves, figures and greedy evaluation of finished runs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import load_config
from .pipeline import read_metrics

HEADER = "variant\tstep\tmean_return\tstd_return\tn_runs"


def episode_rows(run_dir) -> list[dict]:
    return [r for r in read_metrics(Path(run_dir) / "metrics.jsonl") if r.get("event") == "episode"]


def run_variant(run_dir) -> str:
    return load_config(Path(run_dir) / "config.txt").reward.variant


def success_rate_last(run_dir, n: int = 100) -> float:
    """Success rate over the final ``n`` episodes (all episodes if fewer)."""
    eps = episode_rows(run_dir)
    if not eps:
        return float("nan")
    return float(np.mean([bool(r["success"]) for r in eps[-n:]]))


def binned_returns(episodes, bin_steps: int, n_bins: int) -> np.ndarray:
    """Mean env return of episodes ending in each ``(k*bin, (k+1)*bin]`` window.

    Empty windows repeat the previous value (NaN before the first episode).
    """
    out = np.full(n_bins, np.nan)
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins)
    for row in episodes:
        k = (int(row["step"]) - 1) // bin_steps
        if 0 <= k < n_bins:
            sums[k] += float(row["env_return"])
            counts[k] += 1
    prev = np.nan
    for k in range(n_bins):
        if counts[k]:
            prev = sums[k] / counts[k]
        out[k] = prev
    return out


def plot_series(run_dirs, bin_steps: int = 1000) -> dict:
    """``{variant: (steps, mean, std, n)}`` aligned on a shared step grid."""
    if not run_dirs:
        raise ValueError("need at least one run directory")
    groups: dict[str, list] = defaultdict(list)
    totals = []
    for d in run_dirs:
        cfg = load_config(Path(d) / "config.txt")
        groups[cfg.reward.variant].append(episode_rows(d))
        totals.append(cfg.run.total_steps)
    n_bins = max(1, min(totals) // bin_steps)
    steps = bin_steps * np.arange(1, n_bins + 1)
    series = {}
    for variant in sorted(groups):
        mat = np.stack([binned_returns(eps, bin_steps, n_bins) for eps in groups[variant]])
        ok = np.isfinite(mat)
        n = ok.sum(axis=0)
        filled = np.where(ok, mat, 0.0)
        mean = np.where(n > 0, filled.sum(axis=0) / np.maximum(n, 1), np.nan)
        dev = np.where(ok, filled - mean, 0.0)
        std = np.where(n > 0, np.sqrt((dev * dev).sum(axis=0) / np.maximum(n, 1)), np.nan)
        series[variant] = (steps, mean, std, n)
    return series


def format_plot_data(series: dict) -> str:
    lines = [HEADER]
    for variant, (steps, mean, std, n) in series.items():
        for s, m, sd, k in zip(steps, mean, std, n):
            lines.append(f"{variant}\t{int(s)}\t{m:.6f}\t{sd:.6f}\t{int(k)}")
    return "\n".join(lines) + "\n"


def parse_plot_data(text: str) -> dict:
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    out: dict[str, list] = defaultdict(list)
    for variant, step, mean, std, n in rows:
        out[variant].append((int(step), float(mean), float(std), int(n)))
    return dict(out)


def render_plot(series: dict, png_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, (steps, mean, std, _) in series.items():
        ax.plot(steps, mean, label=variant)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("environment step")
    ax.set_ylabel("episode env return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def emit_plot_data(run_dirs, out_path, bin_steps: int = 1000, figure: bool = True) -> str:
    """Write the tab-delimited curve table to ``out_path`` (and a PNG beside it)."""
    series = plot_series(run_dirs, bin_steps)
    text = format_plot_data(series)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text, encoding="utf-8")
    if figure:
        render_plot(series, out_path.with_suffix(".png"))
    return text


def evaluate_run(run_dir, episodes: int = 20, seed: int = 12345, epsilon: float = 0.0) -> dict:
    """Roll out the saved Q policy; returns success rate and mean env return."""
    from ..agent import QConfig, act_epsilon_greedy, load_q
    from ..gridworld import N_ACTIONS, env_reset, env_step
    from ..seq_encoder import load_encoder
    from .pipeline import Pretrained, _layout, _Observer

    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    grid = cfg.grid()
    encoder = load_encoder(run_dir / "encoder.nnp", cfg.encoder) if (run_dir / "encoder.nnp").exists() \
        else load_encoder(Path(cfg.run.pretrained) / "encoder.nnp", cfg.encoder)
    roster = tuple(grid.tasks)
    obs_fn = _Observer(Pretrained([], roster, encoder, None, None, None), roster,
                       _Observer.load_stats(run_dir / "state_norm.nnp"))
    state_dim = int(np.prod(cfg.encoder.frame_latent_shape)) + len(roster)
    a = cfg.agent
    q = load_q(run_dir / "q.nnp", state_dim, N_ACTIONS, QConfig(hidden=a.hidden))
    rng = np.random.default_rng(seed)
    targets = _layout(cfg, grid)
    wins, returns = [], []
    for _ in range(episodes):
        task = roster[int(rng.integers(len(roster)))]
        st, ob = env_reset(grid, task, rng, targets)
        total = 0.0
        while not st.done:
            act = act_epsilon_greedy(q, obs_fn.state(ob, task), epsilon, rng)
            st, ob, r, _ = env_step(st, act)
            total += r
        wins.append(st.success)
        returns.append(total)
    return {"episodes": episodes, "success_rate": float(np.mean(wins)),
            "mean_env_return": float(np.mean(returns))}
