"""Run configuration: typed sections with a flat ``section.key = value`` text form.

Lines are ``key = value`` with dotted section prefixes; ``#`` starts a
comment; tuples are comma separated; booleans are ``true``/``false``.
Unknown keys and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..agent import QConfig
from ..fb_rep import FBConfig
from ..frame_scorer import ScorerConfig
from ..gridworld import GridConfig
from ..reward_engine import RewardConfig
from ..seq_encoder import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSection:
    side: int = 9
    image_size: int = 24
    tasks: tuple = ("red", "green", "blue")
    max_steps: int = 256
    fixed_layout: bool = False
    layout_seed: int = 0

    def grid(self, sparse: bool, period: int) -> GridConfig:
        return GridConfig(self.side, self.image_size, tuple(self.tasks), self.max_steps,
                          "sparse" if sparse else "dense", period)


@dataclass(frozen=True)
class ExpertSection:
    n_per_task: int = 400


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 100
    t_embed: int = 32
    token_embed: int = 16
    image_embed: int = 144
    hidden: int = 512
    layers: int = 2
    parameterization: str = "v"
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3


@dataclass(frozen=True)
class AgentSection:
    hidden: int = 64
    gamma: float = 0.99
    lr: float = 1e-3
    tau: float = 0.01
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    capacity: int = 100_000
    warmup: int = 5000
    update_every: int = 1

    def q(self) -> QConfig:
        return QConfig(self.hidden, self.gamma, self.lr, self.tau, self.batch_size,
                       self.eps_start, self.eps_end, self.eps_fraction)


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    total_steps: int = 50_000
    goal_refresh: str = "episode"     # episode | fixed
    fb_every: int = 1
    history_window: int = 0           # 0 = every frame since the episode started
    fb_log_every: int = 500
    pretrained: str = ""              # directory holding stage artifacts to reuse


@dataclass(frozen=True)
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    fb: FBConfig = field(default_factory=FBConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    agent: AgentSection = field(default_factory=AgentSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        if self.run.goal_refresh not in ("episode", "fixed"):
            raise ConfigError(f"run.goal_refresh must be episode or fixed, got {self.run.goal_refresh!r}")
        if self.run.total_steps < 1 or self.agent.warmup < 0 or self.run.fb_every < 1:
            raise ConfigError("run.total_steps and run.fb_every must be positive, agent.warmup non-negative")
        if self.encoder.image_size != self.env.image_size:
            raise ConfigError("encoder.image_size must equal env.image_size")
        if self.scorer.frame_dim != 3 * self.env.image_size ** 2:
            raise ConfigError("scorer.frame_dim must equal 3 * env.image_size^2")

    def grid(self) -> GridConfig:
        return self.env.grid(self.reward.sparse, self.reward.sparse_period)


# Skipped because other sections determine them.
_DERIVED = {"scorer": {"frame_dim"}}


def _sections(cfg: RunConfig):
    for f in fields(cfg):
        yield f.name, getattr(cfg, f.name)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind, key: str):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _field_types(section) -> dict:
    hints = typing.get_type_hints(type(section))
    out = {}
    for f in fields(section):
        kind = hints[f.name]
        origin = typing.get_origin(kind)
        out[f.name] = tuple if (kind is tuple or origin is tuple) else kind
    return out


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for name, section in _sections(cfg):
        skip = _DERIVED.get(name, set())
        for f in fields(section):
            if f.name not in skip:
                lines.append(f"{name}.{f.name} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Return ``cfg`` with ``{"section.key": "text value"}`` applied."""
    updates: dict[str, dict] = {}
    for key, text in pairs.items():
        if key.count(".") != 1:
            raise ConfigError(f"{key}: expected section.key")
        sec, name = key.split(".")
        if sec not in {f.name for f in fields(cfg)}:
            raise ConfigError(f"{key}: unknown section {sec!r}")
        types = _field_types(getattr(cfg, sec))
        if name not in types or name in _DERIVED.get(sec, set()):
            raise ConfigError(f"{key}: unknown key")
        updates.setdefault(sec, {})[name] = _parse(str(text), types[name], key)
    try:
        new = {sec: replace(getattr(cfg, sec), **vals) for sec, vals in updates.items()}
        if "env" in new:
            size = new["env"].image_size
            new["scorer"] = replace(new.get("scorer", cfg.scorer), frame_dim=3 * size * size)
        return replace(cfg, **new)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        pairs[key] = value
    return apply_overrides(base if base is not None else RunConfig(), pairs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_value(cfg: RunConfig, path: str):
    sec, name = path.split(".")
    return getattr(getattr(cfg, sec), name)


__all__ = [
    "ConfigError", "RunConfig", "EnvSection", "ExpertSection", "DiffusionSection",
    "AgentSection", "RunSection", "emit_config", "parse_config", "load_config",
    "apply_overrides", "config_value",
]
