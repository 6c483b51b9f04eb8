import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import CONFIGS
from genreward.harness.cli import main
from genreward.harness.config import (
    ConfigError, RunConfig, apply_overrides, config_value, emit_config, load_config, parse_config,
)
from genreward.harness.pipeline import MetricsWriter, StageFailure, read_metrics, run_pipeline
from genreward.harness.report import (
    HEADER, emit_plot_data, format_plot_data, parse_plot_data, plot_series, success_rate_last,
)
from genreward.harness.sweep import sweep

TINY = os.path.join(CONFIGS, "tiny.txt")


# -- configuration ------------------------------------------------------------

def test_config_roundtrip():
    cfg = RunConfig()
    assert parse_config(emit_config(cfg)) == cfg
    tuned = apply_overrides(cfg, {"fb.variant": "standard", "env.tasks": "red,blue",
                                  "reward.sparse": "true", "agent.lr": "3e-4"})
    assert parse_config(emit_config(tuned)) == tuned
    assert tuned.env.tasks == ("red", "blue") and tuned.reward.sparse is True


def test_shipped_configs_parse():
    for name in os.listdir(CONFIGS):
        cfg = load_config(os.path.join(CONFIGS, name))
        assert parse_config(emit_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "fb.nope = 1", "nosection.x = 1", "fb.d = many", "reward.sparse = maybe", "fb = 2",
    "fb.variant = other", "run.goal_refresh = never", "env.image_size = 20", "fb.d = 1\nfb.d = 2",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_image_size_propagates_to_scorer():
    cfg = apply_overrides(RunConfig(), {"env.image_size": "16", "encoder.image_size": "16"})
    assert cfg.scorer.frame_dim == 3 * 16 * 16
    assert config_value(cfg, "encoder.image_size") == 16


# -- metrics ------------------------------------------------------------------

def test_metrics_roundtrip_and_ordering(tmp_path):
    rows = [{"step": 1, "x": 0.5, "flag": True}, {"step": 4, "y": None, "name": "a"}]
    w = MetricsWriter(tmp_path / "m.jsonl")
    for r in rows:
        w.write(r)
    with pytest.raises(RuntimeError):
        w.write({"step": 4})
    w.close()
    back = read_metrics(tmp_path / "m.jsonl")
    assert [{k: v for k, v in r.items() if k != "v"} for r in back] == rows


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = load_config(TINY)
    full_a = run_pipeline(cfg, base / "full_a")
    full_b = run_pipeline(cfg, base / "full_b")
    env = run_pipeline(apply_overrides(cfg, {"reward.variant": "env-only", "run.pretrained": str(full_a)}),
                       base / "env")
    return cfg, full_a, full_b, env


def test_runs_are_byte_identical(tiny_runs):
    _, a, b, _ = tiny_runs
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    for name in ("q.nnp", "fb.nnp", "goal.gvd1", "config.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_resolved_config_reproduces(tiny_runs, tmp_path):
    cfg, a, _, _ = tiny_runs
    again = run_pipeline(load_config(a / "config.txt"), tmp_path / "again")
    assert (again / "metrics.jsonl").read_bytes() == (a / "metrics.jsonl").read_bytes()


def test_gate_rows_and_intrinsic_counts(tiny_runs):
    cfg, a, _, env = tiny_runs
    dt = cfg.reward.interval
    rows = read_metrics(a / "metrics.jsonl")
    for r in rows[1:]:
        assert r["gate"] == (r["t"] % dt == 0)
        if "r_emitted" in r and not r["gate"]:
            pytest.fail("non-gated steps are not logged with a breakdown")
    eps = [r for r in rows if r.get("event") == "episode"]
    expected = sum(e["length"] // dt for e in eps)
    tail = cfg.run.total_steps - eps[-1]["step"]
    calls = json.loads((a / "summary.json").read_text())["intrinsic_calls"]
    assert expected <= calls <= expected + tail // dt
    assert sum(1 for r in rows if r.get("r_video") is not None) == calls
    assert json.loads((env / "summary.json").read_text())["intrinsic_calls"] == 0
    assert all(r.get("r_video") is None and r.get("r_fb") is None for r in read_metrics(env / "metrics.jsonl"))


def test_run_directory_contents(tiny_runs):
    _, a, _, env = tiny_runs
    for name in ("config.txt", "metrics.jsonl", "timing.json", "summary.json", "q.nnp", "encoder.nnp"):
        assert (a / name).exists()
    assert not (env / "fb.nnp").exists() and not (env / "expert.exp1").exists()
    assert 0.0 <= success_rate_last(a) <= 1.0


def test_stage_failure_is_recorded(tmp_path):
    cfg = apply_overrides(load_config(TINY), {"expert.n_per_task": "0"})
    with pytest.raises(StageFailure) as info:
        run_pipeline(cfg, tmp_path / "bad")
    assert info.value.stage == "expert"
    assert json.loads((tmp_path / "bad" / "failure.json").read_text())["stage"] == "expert"
    assert (tmp_path / "bad" / "config.txt").exists()


# -- plot data ------------------------------------------------------------------

def _fake_run(path: Path, variant: str, episodes):
    path.mkdir(parents=True)
    cfg = apply_overrides(RunConfig(), {"reward.variant": variant, "run.total_steps": "30"})
    (path / "config.txt").write_text(emit_config(cfg))
    w = MetricsWriter(path / "metrics.jsonl")
    w.write({"step": 0, "event": "warmup"})
    for step, ret in episodes:
        w.write({"step": step, "event": "episode", "env_return": ret, "success": ret > 0})
    w.close()
    return path


def test_plot_hand_fixture(tmp_path):
    a = _fake_run(tmp_path / "a", "full", [(5, 1.0), (15, 0.0), (25, 1.0)])
    b = _fake_run(tmp_path / "b", "full", [(8, 0.0), (12, 1.0), (19, 1.0)])
    c = _fake_run(tmp_path / "c", "env-only", [(3, 0.5), (29, 1.5)])
    series = plot_series([a, b, c], bin_steps=10)
    steps, mean, std, n = series["full"]
    np.testing.assert_array_equal(steps, [10, 20, 30])
    np.testing.assert_allclose(mean, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(std, [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(n, [2, 2, 2])
    _, mean, std, _ = series["env-only"]
    np.testing.assert_allclose(mean, [0.5, 0.5, 1.5])
    np.testing.assert_array_equal(std, 0.0)
    text = emit_plot_data([a, b, c], tmp_path / "out" / "curves.tsv", bin_steps=10)
    assert text.splitlines()[0] == HEADER
    assert (tmp_path / "out" / "curves.png").stat().st_size > 0
    parsed = parse_plot_data(text)
    assert parsed["full"][0] == (10, 0.5, 0.5, 2)
    assert format_plot_data(series) == text


def test_identical_runs_have_zero_std(tmp_path):
    a = _fake_run(tmp_path / "a", "full", [(5, 1.0), (15, 0.0)])
    b = _fake_run(tmp_path / "b", "full", [(5, 1.0), (15, 0.0)])
    for runs in ([a], [a, b]):
        _, _, std, _ = plot_series(runs, bin_steps=10)["full"]
        assert np.all(std == 0.0)
    with pytest.raises(ValueError):
        plot_series([])


# -- sweep and CLI ----------------------------------------------------------------

def test_sweep_layout(tmp_path):
    cfg = apply_overrides(load_config(TINY), {"run.total_steps": "200"})
    runs = sweep(cfg, "reward.alpha", ["0.01", "0.1"], tmp_path, seeds=[0, 1])
    assert [r.relative_to(tmp_path).as_posix() for r in runs] == [
        "reward.alpha=0.01/seed0", "reward.alpha=0.01/seed1",
        "reward.alpha=0.1/seed0", "reward.alpha=0.1/seed1"]
    assert load_config(runs[2] / "config.txt").reward.alpha == 0.1
    assert load_config(runs[1] / "config.txt").run.seed == 1
    assert (tmp_path / "pretrained" / "denoiser.nnp").exists()
    with pytest.raises(ConfigError):
        sweep(cfg, "reward.gain", ["1"], tmp_path / "x")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train-agent", "--config", str(tmp_path / "missing.txt")]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("fb.d = lots\n")
    assert main(["train-agent", "--config", str(bad)]) == 2
    assert main(["train-agent", "--config", TINY, "--set", "expert.n_per_task=0",
                 "--out", str(tmp_path / "fail")]) == 3
    assert main(["train-agent", "--config", TINY, "--reward", "env-only", "--sparse",
                 "--set", "run.total_steps=100", "--out", str(tmp_path / "ok")]) == 0
    out = capsys.readouterr().out
    assert "episodes" in out
    assert main(["eval", "--run", str(tmp_path / "ok"), "--episodes", "2"]) == 0
    assert main(["plot", "--runs", str(tmp_path / "ok"), "--out", str(tmp_path / "plot"), "--bin", "50"]) == 0
    assert (tmp_path / "plot" / "curves.tsv").exists()


def test_cli_oracle_check_failure_exit(tmp_path):
    dump = tmp_path / "chain.json"
    assert main(["oracle-check", "--builtin", "chain", "--steps", "5", "--dump-mdp", str(dump)]) == 3
    assert main(["oracle-check", "--mdp", str(dump), "--steps", "5"]) == 3
    assert main(["oracle-check", "--mdp", str(tmp_path / "none.json")]) == 3


def test_cli_log_env_and_console_entry(tmp_path):
    env = dict(os.environ, GENREWARD_LOG="loud")
    res = subprocess.run([sys.executable, "-m", "genreward.harness.cli", "eval", "--run", str(tmp_path)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 2 and "GENREWARD_LOG" in res.stderr
    res = subprocess.run([sys.executable, "-m", "genreward.harness.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("collect-expert", "train-encoder", "train-scorer", "train-diffusion", "gen-goal",
                "train-agent", "oracle-check", "eval", "plot", "sweep"):
        assert sub in res.stdout


def test_cli_pretraining_subcommands(tmp_path):
    out = str(tmp_path / "pre")
    for cmd in ("collect-expert", "train-encoder", "train-scorer", "train-diffusion", "gen-goal"):
        assert main([cmd, "--config", TINY, "--out", out]) == 0
    assert (tmp_path / "pre" / "goal.gvd1").exists()
    assert main(["gen-goal", "--config", TINY, "--out", out, "--task", "purple"]) == 2
