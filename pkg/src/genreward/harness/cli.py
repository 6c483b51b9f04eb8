"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.  The log
level comes from ``GENREWARD_LOG`` (error, info or debug; default info).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("genreward")


class CheckFailed(RuntimeError):
    pass


def _setup_logging():
    level = os.environ.get("GENREWARD_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"GENREWARD_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if args.seed is not None:
        pairs["run.seed"] = str(args.seed)
    return apply_overrides(cfg, pairs) if pairs else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_kv(d: dict):
    for k in sorted(d):
        print(f"{k}\t{d[k]}")


def cmd_collect_expert(args):
    from .pipeline import _Timer, stage_expert

    cfg, out = _config(args), _out(args, "runs/pretrained")
    episodes, roster = _Timer().run("expert", stage_expert, cfg, out)
    _print_kv({"episodes": len(episodes), "roster": ",".join(roster), "path": out / "expert.exp1"})


def cmd_train_encoder(args):
    from .pipeline import _Timer, stage_encoder, stage_expert
    from ..seq_encoder import reconstruction_mse

    cfg, out = _config(args), _out(args, "runs/pretrained")
    t = _Timer()
    episodes, _ = t.run("expert", stage_expert, cfg, out)
    enc = t.run("encoder", stage_encoder, cfg, out, episodes)
    frames = np.concatenate([ep.frames for ep in episodes[::10]])
    _print_kv({"reconstruction_mse": reconstruction_mse(enc, frames), "path": out / "encoder.nnp"})


def cmd_train_scorer(args):
    from .pipeline import _Timer, stage_expert, stage_scorer
    from ..frame_scorer import selection_accuracy

    cfg, out = _config(args), _out(args, "runs/pretrained")
    t = _Timer()
    episodes, roster = t.run("expert", stage_expert, cfg, out)
    scorer = t.run("scorer", stage_scorer, cfg, out, episodes, roster)
    report = out / "scorer_report.json"
    stats = json.loads(report.read_text()) if report.exists() else \
        {"selection_accuracy_all": selection_accuracy(scorer, episodes)}
    _print_kv({**stats, "path": out / "scorer.nnp"})


def cmd_train_diffusion(args):
    from .pipeline import _Timer, stage_diffusion, stage_encoder, stage_expert, stage_latents

    cfg, out = _config(args), _out(args, "runs/pretrained")
    t = _Timer()
    episodes, roster = t.run("expert", stage_expert, cfg, out)
    enc = t.run("encoder", stage_encoder, cfg, out, episodes)
    lat = t.run("latents", stage_latents, cfg, out, enc, episodes, roster)
    t.run("diffusion", stage_diffusion, cfg, out, lat, roster)
    _print_kv({"latent_videos": len(lat[0]), "path": out / "denoiser.nnp"})


def cmd_gen_goal(args):
    from .pipeline import _Timer, _layout, generate_goal, pretrain
    from ..frame_scorer import score_frame
    from ..gridworld import env_reset
    from ..seq_encoder import save_latent

    cfg, out = _config(args), _out(args, "runs/pretrained")
    pre = pretrain(cfg, out, _Timer())
    grid = cfg.grid()
    task = args.task or grid.tasks[0]
    if task not in grid.tasks:
        raise ConfigError(f"task {task!r} not in {grid.tasks}")
    _, obs = env_reset(grid, task, cfg.run.seed, _layout(cfg, grid))
    goal = generate_goal(pre, task, obs, np.random.default_rng(cfg.run.seed))
    save_latent(out / "goal.gvd1", goal.latent)
    _print_kv({"task": task, "frame_index": goal.frame_index,
               "score": score_frame(pre.scorer, goal.frame, task), "path": out / "goal.gvd1"})


def cmd_train_agent(args):
    from .pipeline import run_pipeline

    cfg = _config(args)
    pairs = {"reward.variant": args.reward} if args.reward else {}
    if args.sparse:
        pairs["reward.sparse"] = "true"
    cfg = apply_overrides(cfg, pairs) if pairs else cfg
    out = _out(args, f"runs/{cfg.reward.variant}-seed{cfg.run.seed}")
    run_pipeline(cfg, out)
    summary = json.loads((out / "summary.json").read_text())
    _print_kv({**summary, "run_dir": out})


def cmd_oracle_check(args):
    from dataclasses import replace

    from .checks import ORACLE_FB, run_oracle_check
    from ..gridworld import GridConfig, tabular_from_grid
    from ..oracle import chain_mdp

    if args.mdp:
        mdp = args.mdp
    elif args.builtin == "chain":
        mdp = chain_mdp(8, 0.9)
    else:
        mdp = tabular_from_grid(GridConfig(side=4, tasks=("red",)), "red", 0.9)
    fb_cfg = ORACLE_FB
    if args.config:
        fb_cfg = replace(load_config(args.config).fb, variant="standard")
    if args.dump_mdp and not isinstance(mdp, str):
        Path(args.dump_mdp).write_text(mdp.to_json(), encoding="utf-8")
    seed = 0 if args.seed is None else args.seed
    report = run_oracle_check(mdp, fb_cfg, seed=seed, steps=args.steps)
    if args.out:
        _out(args, "").joinpath("oracle_report.json").write_text(json.dumps(report, indent=1) + "\n")
    _print_kv(report)
    if not report["passed"]:
        raise CheckFailed("fidelity below the configured thresholds")


def cmd_eval(args):
    from .report import evaluate_run, success_rate_last

    res = evaluate_run(args.run, episodes=args.episodes, seed=1000 if args.seed is None else args.seed)
    res["train_success_last100"] = success_rate_last(args.run, 100)
    _print_kv(res)


def cmd_plot(args):
    from .report import emit_plot_data

    out = _out(args, "runs/plot")
    text = emit_plot_data(args.runs, out / "curves.tsv", bin_steps=args.bin)
    sys.stdout.write(text)
    log.info("figure written to %s", out / "curves.png")


def cmd_sweep(args):
    from .sweep import sweep

    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = _out(args, f"runs/sweep-{args.param}")
    for run in sweep(cfg, args.param, values, out, seeds):
        summary = json.loads((run / "summary.json").read_text())
        print(f"{run}\t{summary['episodes']}\t{summary['successes']}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    p = argparse.ArgumentParser(prog="genreward", description="Generative-reward pipeline on GoalGrid")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("collect-expert", parents=[common]).set_defaults(fn=cmd_collect_expert)
    sub.add_parser("train-encoder", parents=[common]).set_defaults(fn=cmd_train_encoder)
    sub.add_parser("train-scorer", parents=[common]).set_defaults(fn=cmd_train_scorer)
    sub.add_parser("train-diffusion", parents=[common]).set_defaults(fn=cmd_train_diffusion)
    g = sub.add_parser("gen-goal", parents=[common])
    g.add_argument("--task")
    g.set_defaults(fn=cmd_gen_goal)
    a = sub.add_parser("train-agent", parents=[common])
    a.add_argument("--reward", choices=["full", "video-only", "fb-only", "env-only"],
                   help="reward variant (default: reward.variant from the config)")
    a.add_argument("--sparse", action="store_true", help="sparse env reward every 64 steps")
    a.set_defaults(fn=cmd_train_agent)
    o = sub.add_parser("oracle-check", parents=[common])
    o.add_argument("--mdp", help="TabularMDP JSON file")
    o.add_argument("--builtin", choices=["chain", "grid"], default="chain")
    o.add_argument("--steps", type=int, help="cap on FB train steps")
    o.add_argument("--dump-mdp", help="write the builtin MDP as JSON here")
    o.set_defaults(fn=cmd_oracle_check)
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--run", required=True, help="run directory")
    e.add_argument("--episodes", type=int, default=20)
    e.set_defaults(fn=cmd_eval)
    pl = sub.add_parser("plot", parents=[common])
    pl.add_argument("--runs", nargs="+", required=True)
    pl.add_argument("--bin", type=int, default=1000, help="steps per curve point")
    pl.set_defaults(fn=cmd_plot)
    sw = sub.add_parser("sweep", parents=[common])
    sw.add_argument("--param", required=True, help="dotted config key, e.g. reward.alpha")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    sw.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    from .pipeline import StageFailure

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
