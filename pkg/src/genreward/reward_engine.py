"""Video-level reward, generative reward composition and interval gating."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from .numcore import cosine

VARIANTS = ("full", "video-only", "fb-only", "env-only")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1e-2
    beta: float = 1e-5
    interval: int = 128
    sparse: bool = False
    sparse_period: int = 64
    variant: str = "full"

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("intrinsic interval must be at least 1")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("reward weights must be finite")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {self.variant!r}")

    @property
    def uses_video(self) -> bool:
        return self.variant in ("full", "video-only")

    @property
    def uses_fb(self) -> bool:
        return self.variant in ("full", "fb-only")


@dataclass
class RewardBreakdown:
    t: int
    r_env: float
    r_video: float | None
    r_fb: float | None
    r_emitted: float
    gate: bool

    def to_row(self) -> dict:
        return asdict(self)


def video_level_reward(encoder_params, history, goal_latent: np.ndarray) -> float:
    """Cosine between the latent of 16 uniformly sampled history frames and the goal latent."""
    from .seq_encoder import encode_video, uniform_sample_frames

    if len(history) == 0:
        raise ValueError("history is empty")
    z = encode_video(encoder_params, uniform_sample_frames(history))
    return cosine(z, goal_latent)


def compose_reward(r_video, r_fb, r_env: float, cfg: RewardConfig) -> float:
    """``alpha * r_video + beta * r_fb + r_env``; disabled terms carry weight 0."""
    alpha = cfg.alpha if cfg.uses_video else 0.0
    beta = cfg.beta if cfg.uses_fb else 0.0
    r_video = 0.0 if r_video is None else float(r_video)
    r_fb = 0.0 if r_fb is None else float(r_fb)
    r_env = float(r_env)
    if not (math.isfinite(r_video) and math.isfinite(r_fb) and math.isfinite(r_env)):
        raise ValueError(f"non-finite reward term: video={r_video} fb={r_fb} env={r_env}")
    return alpha * r_video + beta * r_fb + r_env


class IntrinsicRewardError(RuntimeError):
    pass


def gated_reward(t: int, r_env: float,
                 intrinsic_provider: Callable[[], tuple], cfg: RewardConfig) -> RewardBreakdown:
    """Emit ``r_gen`` on steps with ``t % interval == 0``, the raw env reward otherwise.

    The provider returns ``(r_video, r_fb)`` (either may be ``None``) and is
    only called on gated steps of variants that use an intrinsic term.
    """
    if t < 1:
        raise ValueError("steps are counted from 1")
    gate = t % cfg.interval == 0
    if not gate:
        return RewardBreakdown(t, float(r_env), None, None, float(r_env), False)
    if cfg.variant == "env-only":
        return RewardBreakdown(t, float(r_env), None, None, compose_reward(None, None, r_env, cfg), True)
    try:
        r_video, r_fb = intrinsic_provider()
    except Exception as exc:
        raise IntrinsicRewardError(f"intrinsic reward failed at step {t}: {exc}") from exc
    r_video = None if r_video is None else float(r_video)
    r_fb = None if r_fb is None else float(r_fb)
    return RewardBreakdown(t, float(r_env), r_video, r_fb,
                           compose_reward(r_video, r_fb, r_env, cfg), True)


def sparse_env_gate(t: int, raw_r_env: float, success: bool, period: int = 64) -> float:
    """Pass the env reward on multiples of ``period`` or on success, else 0."""
    if t < 1:
        raise ValueError("steps are counted from 1")
    return float(raw_r_env) if (t % period == 0 or success) else 0.0
