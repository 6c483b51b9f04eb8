"""Parameter sweeps and seed sets over the pipeline."""

from __future__ import annotations

import multiprocessing as mp
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, config_value
from .pipeline import StageFailure, pretrain, run_pipeline

# Sections whose values change the pretrained artifacts.
PRETRAIN_SECTIONS = ("env", "expert", "encoder", "scorer", "diffusion")


def _run_isolated(cfg: RunConfig, out: Path) -> Path:
    """``run_pipeline`` in a freshly spawned interpreter, so runs share no process state."""
    proc = mp.get_context("spawn").Process(target=run_pipeline, args=(cfg, out))
    proc.start()
    proc.join()
    if proc.exitcode != 0:
        raise StageFailure("agent", RuntimeError(f"run in {out} exited with code {proc.exitcode}"))
    return out


def run_set(cfg: RunConfig, out, seeds, overrides: dict | None = None, share_pretrained: bool = True,
            isolate: bool = False):
    """One pipeline run per seed under ``out/seed<k>``; pretraining is shared when allowed.

    With ``isolate`` every run gets its own process.
    """
    out = Path(out)
    overrides = dict(overrides or {})
    if share_pretrained and not cfg.run.pretrained:
        pre_dir = out / "pretrained"
        pretrain(cfg, pre_dir)
        overrides["run.pretrained"] = str(pre_dir)
    runs = []
    for seed in seeds:
        run_cfg = apply_overrides(cfg, {**overrides, "run.seed": str(seed)})
        runner = _run_isolated if isolate else run_pipeline
        runs.append(Path(runner(run_cfg, out / f"seed{seed}")))
    return runs


def sweep(cfg: RunConfig, path: str, values, out, seeds=None) -> list[Path]:
    """One run per ``(value, seed)``; returns run directories in value-major order."""
    try:
        config_value(cfg, path)
    except (ValueError, AttributeError):
        raise ConfigError(f"sweep parameter {path!r} does not resolve in the config") from None
    seeds = [cfg.run.seed] if seeds is None else list(seeds)
    out = Path(out)
    shared = path.split(".")[0] not in PRETRAIN_SECTIONS
    if shared and not cfg.run.pretrained:
        pretrain(cfg, out / "pretrained")
        cfg = apply_overrides(cfg, {"run.pretrained": str(out / "pretrained")})
    runs = []
    for value in values:
        runs += run_set(cfg, out / f"{path}={value}", seeds, {path: str(value)},
                        share_pretrained=False, isolate=True)
    return runs
