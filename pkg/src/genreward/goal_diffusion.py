"""Small conditional DDPM over latent videos.

The denoiser is an MLP fed with the noisy latent concatenated with a
timestep embedding, a task-token embedding and a linear projection of the
first frame's latent.  The network output is read through one of three
parameterizations and turned into a noise estimate in closed form:

``x0``  clean sample, ``eps_hat = (x_t - a_t * x0_hat) / s_t``
``v``   velocity ``a_t * eps - s_t * x0``, ``eps_hat = s_t * x_t + a_t * v_hat``
``eps`` the noise itself

``x0`` suits near-deterministic data (a point mass is a constant output);
``v`` hands the near-identity part of the map at high noise to the formula,
which matters when the latent is wider than the hidden layers.  The loss is
the noise-matching objective in every case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Mlp, OptState, ShapeError, mlp_backward, mlp_forward_cached, optimizer_step


@dataclass
class NoiseSchedule:
    """Variance-preserving schedule; index 0 is the clean latent.

    ``alpha[t]`` is the signal coefficient (product of ``sqrt(1 - beta)``) and
    ``sigma[t] = sqrt(1 - alpha[t]**2)``.
    """

    T: int
    betas: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def to_meta(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[1]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 100, beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta ramp; defaults rescale the 1000-step (1e-4, 0.02) ramp to ``T`` steps."""
    if T < 1:
        raise ValueError("T must be positive")
    beta_start = 1e-4 * 1000 / T if beta_start is None else beta_start
    beta_end = min(0.02 * 1000 / T, 0.999) if beta_end is None else beta_end
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = np.sqrt(np.cumprod(1.0 - betas))
    sigma = np.sqrt(1.0 - alpha ** 2)
    return NoiseSchedule(T, betas, alpha, sigma)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``x_t = alpha_t x0 + sigma_t eps``; ``t`` may be a scalar or one step per row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} differs from latent shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    a = schedule.alpha[t]
    s = schedule.sigma[t]
    if t.ndim == 1:
        a = a.reshape((-1,) + (1,) * (x0.ndim - 1))
        s = s.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (a * x0 + s * eps).astype(x0.dtype, copy=False)


# What the network outputs: the noise itself, the clean sample, or the
# velocity v = alpha * eps - sigma * x0.  All three are scored by the same
# noise-prediction loss.
PARAMETERIZATIONS = ("eps", "x0", "v")


@dataclass(frozen=True)
class DiffusionConfig:
    latent_shape: tuple = (4, 4, 6, 6)
    first_dim: int = 144
    n_tokens: int = 3
    T: int = 100
    t_embed: int = 32
    token_embed: int = 16
    image_embed: int = 16
    hidden: int = 512
    layers: int = 2
    parameterization: str = "x0"
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))


@dataclass
class DenoiserParams:
    cfg: DiffusionConfig
    net: Mlp
    t_table: np.ndarray       # (T + 1, t_embed)
    tok_table: np.ndarray     # (n_tokens, token_embed)
    img_w: np.ndarray         # (first_dim, image_embed)
    img_b: np.ndarray         # (image_embed,)
    scale: float = 1.0        # data are multiplied by this before diffusion

    @classmethod
    def init(cls, cfg: DiffusionConfig, rng: np.random.Generator, dtype=np.float32):
        if cfg.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {cfg.parameterization!r}")
        D = cfg.latent_dim
        in_dim = D + cfg.t_embed + cfg.token_embed + cfg.image_embed
        net = Mlp.init([in_dim] + [cfg.hidden] * cfg.layers + [D], rng, dtype=dtype)
        lim = np.sqrt(6.0 / (cfg.first_dim + cfg.image_embed))
        return cls(
            cfg, net,
            (0.1 * rng.standard_normal((cfg.T + 1, cfg.t_embed))).astype(dtype),
            (0.1 * rng.standard_normal((cfg.n_tokens, cfg.token_embed))).astype(dtype),
            rng.uniform(-lim, lim, (cfg.first_dim, cfg.image_embed)).astype(dtype),
            np.zeros(cfg.image_embed, dtype=dtype),
        )

    def arrays(self):
        return self.net.arrays() + [self.t_table, self.tok_table, self.img_w, self.img_b]

    def _inputs(self, x_t, t, tokens, first):
        first = np.asarray(first, dtype=self.net.dtype).reshape(len(x_t), -1)
        if first.shape[1] != self.cfg.first_dim:
            raise ShapeError(f"first-frame latent width {first.shape[1]} != {self.cfg.first_dim}")
        # the conditioning frame lives in the same rescaled space as the data
        first = first * self.net.dtype.type(self.scale)
        c_image = first @ self.img_w + self.img_b
        return np.concatenate([x_t, self.t_table[t], self.tok_table[tokens], c_image], axis=1), first

    def predict_eps(self, x_t, t, tokens, first, schedule: NoiseSchedule, cache: bool = False):
        """Noise estimate for flattened ``x_t`` (N, D) at integer steps ``t`` (N,)."""
        x_t = np.asarray(x_t, dtype=self.net.dtype)
        inp, first = self._inputs(x_t, t, tokens, first)
        out, net_cache = mlp_forward_cached(self.net, inp)
        a = schedule.alpha[t][:, None].astype(x_t.dtype)
        s = schedule.sigma[t][:, None].astype(x_t.dtype)
        if self.cfg.parameterization == "x0":
            eps_hat = (x_t - a * out) / s
        elif self.cfg.parameterization == "v":
            eps_hat = s * x_t + a * out
        else:
            eps_hat = out
        if cache:
            return eps_hat, (net_cache, first, t, tokens)
        return eps_hat


def _draw(rng: np.random.Generator, n: int, D: int, T: int, dtype):
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, D)).astype(dtype)
    return t, eps


def _batch_arrays(batch, D):
    x0, tokens, first = batch
    x0 = np.asarray(x0).reshape(len(x0), -1)
    if x0.shape[1] != D:
        raise ShapeError(f"latent width {x0.shape[1]} != {D}")
    if len(x0) == 0:
        raise ValueError("empty batch")
    return x0, np.asarray(tokens, dtype=int), np.asarray(first).reshape(len(x0), -1)


def diffusion_loss(model, batch, schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    """Mean over the batch of ``||eps_hat(x_t, t, c_text, c_image) - eps||^2``.

    ``batch`` is ``(x0, tokens, first_frame_latents)`` in the model's working
    (scaled) space.  ``model`` is anything with a ``predict_eps`` method, so a
    rigged predictor can stand in for a trained network.
    """
    D = int(np.prod(np.shape(batch[0])[1:]))
    x0, tokens, first = _batch_arrays(batch, D)
    t, eps = _draw(rng, len(x0), D, schedule.T, x0.dtype)
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat = model.predict_eps(x_t, t, tokens, first, schedule)
    loss = float(np.mean(np.sum((eps_hat - eps) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError("diffusion loss is not finite")
    return loss


def diffusion_loss_and_grad(params: DenoiserParams, batch, schedule: NoiseSchedule,
                            rng: np.random.Generator):
    """Same draws as :func:`diffusion_loss`, plus gradients ordered like ``params.arrays()``."""
    cfg = params.cfg
    x0, tokens, first = _batch_arrays(batch, cfg.latent_dim)
    x0 = x0.astype(params.net.dtype, copy=False)
    t, eps = _draw(rng, len(x0), cfg.latent_dim, schedule.T, x0.dtype)
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat, (net_cache, first, t, tokens) = params.predict_eps(x_t, t, tokens, first, schedule, cache=True)
    diff = eps_hat - eps
    n = len(x0)
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError("diffusion loss is not finite")
    g = 2.0 * diff / n
    if cfg.parameterization == "x0":
        g = g * (-(schedule.alpha[t] / schedule.sigma[t])[:, None]).astype(g.dtype)
    elif cfg.parameterization == "v":
        g = g * schedule.alpha[t][:, None].astype(g.dtype)
    net_grads, g_in = mlp_backward(params.net, net_cache, g)
    D = cfg.latent_dim
    g_t = g_in[:, D:D + cfg.t_embed]
    g_tok = g_in[:, D + cfg.t_embed:D + cfg.t_embed + cfg.token_embed]
    g_img = g_in[:, D + cfg.t_embed + cfg.token_embed:]
    t_grad = np.zeros_like(params.t_table)
    np.add.at(t_grad, t, g_t)
    tok_grad = np.zeros_like(params.tok_table)
    np.add.at(tok_grad, tokens, g_tok)
    img_w_grad = first.T @ g_img
    img_b_grad = g_img.sum(axis=0)
    return loss, net_grads + [t_grad, tok_grad, img_w_grad, img_b_grad]


class DiffusionDiverged(RuntimeError):
    pass


def train_diffusion(latents: np.ndarray, tokens, first_latents: np.ndarray,
                    cfg: DiffusionConfig, seed: int, schedule: NoiseSchedule | None = None,
                    steps: int | None = None, divergence_window: int = 1000):
    """Fit a denoiser on ``(latent video, token, first-frame latent)`` triples.

    Latents are rescaled by one global factor (inverse std of the data) so the
    diffusion runs near unit scale; the factor is stored on the params.
    Returns ``(params, schedule, trace)``.
    """
    latents = np.asarray(latents, dtype=np.float32).reshape(len(latents), -1)
    if len(latents) == 0:
        raise ValueError("empty training set")
    tokens = np.asarray(tokens, dtype=int)
    first_latents = np.asarray(first_latents, dtype=np.float32).reshape(len(latents), -1)
    schedule = make_schedule(cfg.T) if schedule is None else schedule
    rng = np.random.default_rng(seed)
    params = DenoiserParams.init(cfg, rng)
    std = float(latents.std())
    # stored as f32 so a reloaded checkpoint samples identically
    params.scale = float(np.float32(1.0 / std)) if std > 1e-8 else 1.0
    x_all = latents * params.scale
    arrays = params.arrays()
    opt = OptState("adam", lr=cfg.lr)
    trace = []
    initial = None
    bad = 0
    for step in range(cfg.steps if steps is None else steps):
        idx = rng.integers(len(x_all), size=cfg.batch_size)
        loss, grads = diffusion_loss_and_grad(params, (x_all[idx], tokens[idx], first_latents[idx]),
                                              schedule, rng)
        initial = loss if initial is None else initial
        bad = bad + 1 if loss > 10 * initial else 0
        if bad >= divergence_window:
            raise DiffusionDiverged(f"loss above 10x initial for {bad} steps (step {step})")
        optimizer_step(opt, arrays, grads)
        trace.append(loss)
    return params, schedule, trace


def sample_goal_video(model, schedule: NoiseSchedule, token: int, first_frame_latent,
                      seed, n: int = 1, latent_shape=None) -> np.ndarray:
    """Ancestral DDPM sampling from ``x_T ~ N(0, I)`` to ``x_0``.

    Uses the posterior variance ``beta_t sigma_{t-1}^2 / sigma_t^2``, so the
    final step is noise-free.  Output is in data units (the model's scale is
    undone) with shape ``latent_shape`` (``(n,) + latent_shape`` when n > 1).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    latent_shape = model.cfg.latent_shape if latent_shape is None else latent_shape
    D = int(np.prod(latent_shape))
    scale = getattr(model, "scale", 1.0)
    first = np.repeat(np.asarray(first_frame_latent, dtype=np.float32).reshape(1, -1), n, axis=0)
    tokens = np.full(n, token, dtype=int)
    x = rng.standard_normal((n, D))
    for t in range(schedule.T, 0, -1):
        ts = np.full(n, t)
        eps_hat = np.asarray(model.predict_eps(x, ts, tokens, first, schedule), dtype=np.float64)
        beta = schedule.betas[t]
        mean = (x - beta / schedule.sigma[t] * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            var = beta * schedule.sigma[t - 1] ** 2 / schedule.sigma[t] ** 2
            x = mean + np.sqrt(var) * rng.standard_normal((n, D))
        else:
            x = mean
    out = (x / scale).astype(np.float32)
    return out.reshape(latent_shape) if n == 1 else out.reshape((n,) + tuple(latent_shape))


def save_denoiser(path, params: DenoiserParams) -> None:
    from .numcore import save_arrays

    save_arrays(path, params.arrays() + [np.array([params.scale], dtype=np.float32)])


def load_denoiser(path, cfg: DiffusionConfig) -> DenoiserParams:
    from .numcore import load_arrays

    params = DenoiserParams.init(cfg, np.random.default_rng(0))
    arrays = load_arrays(path)
    mine = params.arrays()
    if len(arrays) != len(mine) + 1:
        raise ShapeError("checkpoint does not match the denoiser configuration")
    for dst, src in zip(mine, arrays):
        dst[...] = src
    params.scale = float(arrays[-1][0])
    return params
