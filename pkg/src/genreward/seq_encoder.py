"""Spatiotemporal autoencoder producing latent videos.

Each frame is cut into non-overlapping ``stride x stride`` patches; a shared
MLP maps every patch to ``latent_channels`` numbers (a strided convolution
written as a matrix product).  Consecutive per-frame latents are averaged in
groups of ``temporal_stride`` to form the latent video.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import Mlp, OptState, ShapeError, mlp_backward, mlp_forward_cached, optimizer_step

N_FRAMES = 16


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 24
    channels: int = 3
    spatial_stride: int = 4
    temporal_stride: int = 4
    latent_channels: int = 4
    hidden: int = 64
    kl_weight: float = 0.0
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3

    @property
    def grid(self) -> int:
        return self.image_size // self.spatial_stride

    @property
    def patch_dim(self) -> int:
        return self.channels * self.spatial_stride ** 2

    @property
    def frame_latent_shape(self) -> tuple:
        return (self.latent_channels, self.grid, self.grid)

    @property
    def latent_shape(self) -> tuple:
        return (N_FRAMES // self.temporal_stride,) + self.frame_latent_shape


@dataclass
class SeqEncoderParams:
    cfg: EncoderConfig
    enc: Mlp   # patch -> (mean, log-variance), 2 * latent_channels outputs
    dec: Mlp   # latent -> patch logits

    def arrays(self):
        return self.enc.arrays() + self.dec.arrays()

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        if cfg.image_size % cfg.spatial_stride:
            raise ValueError("image size must be a multiple of the spatial stride")
        if N_FRAMES % cfg.temporal_stride:
            raise ValueError("temporal stride must divide 16")
        enc = Mlp.init([cfg.patch_dim, cfg.hidden, 2 * cfg.latent_channels], rng, dtype=dtype)
        dec = Mlp.init([cfg.latent_channels, cfg.hidden, cfg.patch_dim], rng, dtype=dtype)
        return cls(cfg, enc, dec)


def patchify(frames: np.ndarray, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H/s, W/s, C*s*s)."""
    n, c, h, w = frames.shape
    x = frames.reshape(n, c, h // stride, stride, w // stride, stride)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(n, h // stride, w // stride, c * stride * stride)


def unpatchify(patches: np.ndarray, stride: int, channels: int) -> np.ndarray:
    n, gh, gw, _ = patches.shape
    x = patches.reshape(n, gh, gw, channels, stride, stride)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(n, channels, gh * stride, gw * stride)


def uniform_sample_frames(frames, k: int = N_FRAMES):
    """Pick ``k`` frames at indices ``round(i (L-1) / (k-1))``; short sequences repeat."""
    L = len(frames)
    if L == 0:
        raise ValueError("cannot sample from an empty sequence")
    if k < 2:
        raise ValueError("k must be at least 2")
    idx = np.rint(np.arange(k) * (L - 1) / (k - 1)).astype(int)
    idx = np.clip(idx, 0, L - 1)
    if isinstance(frames, np.ndarray):
        return frames[idx]
    return np.stack([frames[i] for i in idx])


def _check_frames(params: SeqEncoderParams, frames: np.ndarray) -> np.ndarray:
    cfg = params.cfg
    frames = np.asarray(frames)
    if frames.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"frames {frames.shape} do not match "
                         f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    return frames


def encode_frames(params: SeqEncoderParams, frames: np.ndarray) -> np.ndarray:
    """Per-frame latent means, (N, C_lat, g, g)."""
    frames = _check_frames(params, frames)
    cfg = params.cfg
    out, _ = mlp_forward_cached(params.enc, patchify(frames, cfg.spatial_stride))
    return out[..., :cfg.latent_channels].transpose(0, 3, 1, 2)


def decode_frames(params: SeqEncoderParams, latents: np.ndarray) -> np.ndarray:
    cfg = params.cfg
    latents = np.asarray(latents)
    if latents.shape[1:] != cfg.frame_latent_shape:
        raise ShapeError(f"latent {latents.shape} does not match {cfg.frame_latent_shape}")
    logits, _ = mlp_forward_cached(params.dec, latents.transpose(0, 2, 3, 1))
    return unpatchify(_sigmoid(logits), cfg.spatial_stride, cfg.channels)


def encode_video(params: SeqEncoderParams, frames: np.ndarray) -> np.ndarray:
    """16 frames -> latent video (16 / temporal_stride, C_lat, g, g)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) != N_FRAMES:
        raise ShapeError(f"encode_video needs exactly {N_FRAMES} frames, got shape {frames.shape}")
    per = encode_frames(params, frames)
    ts = params.cfg.temporal_stride
    return per.reshape((N_FRAMES // ts, ts) + per.shape[1:]).mean(axis=1)


def decode_video(params: SeqEncoderParams, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent)
    if latent.shape != params.cfg.latent_shape:
        raise ShapeError(f"latent video {latent.shape} does not match {params.cfg.latent_shape}")
    frames = decode_frames(params, latent)
    return np.repeat(frames, params.cfg.temporal_stride, axis=0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def autoencoder_loss(params: SeqEncoderParams, frames: np.ndarray,
                     rng: np.random.Generator | None = None, grad: bool = True):
    """Per-pixel reconstruction MSE plus ``kl_weight`` x mean per-latent KL.

    With ``kl_weight == 0`` the latent is the encoder mean and the objective
    is plain MSE; otherwise one reparameterised sample is drawn from ``rng``.
    """
    cfg = params.cfg
    frames = _check_frames(params, frames).astype(params.enc.dtype, copy=False)
    x = patchify(frames, cfg.spatial_stride)
    h, enc_cache = mlp_forward_cached(params.enc, x)
    C = cfg.latent_channels
    mu, logvar = h[..., :C], h[..., C:]
    use_kl = cfg.kl_weight > 0
    if use_kl:
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
    else:
        z = mu
    logits, dec_cache = mlp_forward_cached(params.dec, z)
    recon = _sigmoid(logits)
    diff = recon - x
    mse = float(np.mean(diff * diff))
    loss = mse
    if use_kl:
        kl_el = 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar)
        loss += cfg.kl_weight * float(np.mean(kl_el))
    if not np.isfinite(loss):
        raise FloatingPointError(f"autoencoder loss is not finite ({loss})")
    if not grad:
        return loss, None
    g_recon = 2.0 * diff / diff.size
    g_logits = g_recon * recon * (1 - recon)
    dec_grads, g_z = mlp_backward(params.dec, dec_cache, g_logits)
    g_h = np.zeros_like(h)
    g_h[..., :C] = g_z
    if use_kl:
        n_lat = mu.size
        g_h[..., :C] += cfg.kl_weight * mu / n_lat
        g_h[..., C:] = g_z * eps * 0.5 * std + cfg.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / n_lat
    enc_grads, _ = mlp_backward(params.enc, enc_cache, g_h)
    return loss, enc_grads + dec_grads


def train_autoencoder(frames: np.ndarray, cfg: EncoderConfig, seed: int,
                      steps: int | None = None):
    """Minibatch Adam on the reconstruction objective.

    Returns ``(params, trace)`` with one loss per step.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if len(frames) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    params = SeqEncoderParams.init(cfg, rng)
    opt = OptState("adam", lr=cfg.lr)
    arrays = params.arrays()
    trace = []
    for step in range(cfg.steps if steps is None else steps):
        batch = frames[rng.integers(len(frames), size=min(cfg.batch_size, len(frames)))]
        loss, grads = autoencoder_loss(params, batch, rng)
        if not np.isfinite(loss):
            raise FloatingPointError(f"autoencoder diverged at step {step}: loss={loss}")
        optimizer_step(opt, arrays, grads)
        trace.append(loss)
    return params, trace


def reconstruction_mse(params: SeqEncoderParams, frames: np.ndarray) -> float:
    rec = decode_frames(params, encode_frames(params, frames))
    return float(np.mean((rec - frames) ** 2))


def save_encoder(path, params: SeqEncoderParams) -> None:
    from .numcore import save_arrays

    save_arrays(path, params.arrays())


def load_encoder(path, cfg: EncoderConfig) -> SeqEncoderParams:
    from .numcore import load_arrays

    params = SeqEncoderParams.init(cfg, np.random.default_rng(0))
    arrays = load_arrays(path)
    n = len(params.enc.arrays())
    params.enc.load_arrays(arrays[:n])
    params.dec.load_arrays(arrays[n:])
    return params


# -- GVD1 latent video file: b"GVD1" | 4 x u32 dims | little-endian f32 payload

def save_latent(path, latent: np.ndarray) -> None:
    latent = np.asarray(latent)
    if latent.ndim != 4:
        raise ShapeError("a latent video is 4-D")
    with open(path, "wb") as fh:
        fh.write(b"GVD1")
        fh.write(struct.pack("<4I", *latent.shape))
        fh.write(np.ascontiguousarray(latent, dtype="<f4").tobytes())


def load_latent(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"GVD1":
        raise ValueError(f"{path}: not a GVD1 latent video")
    shape = struct.unpack_from("<4I", data, 4)
    return np.frombuffer(data, dtype="<f4", offset=20, count=int(np.prod(shape))) \
        .reshape(shape).astype(np.float32)
