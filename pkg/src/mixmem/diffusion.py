"""Toy conditional denoising-diffusion decoder over small video clips.

Forward noising, the noise-prediction objective, and ancestral sampling for
a clip tensor [F, C, H, W].  The denoiser is deliberately small: per-frame
linear encoding, a sinusoidal timestep embedding, one pre-norm block that
cross-attends to the conditioning tokens, a zero-initialized linear decoder
(so an untrained model predicts zero noise and the initial loss sits near
the unit-Gaussian variance), and a zero-initialized timestep-gated skip
from the noisy input to the prediction, which lets the model express the
input-proportional part of the noise that the narrow decoder path cannot.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, SamplingError, ScheduleError


class NoiseSchedule:
    """Linear beta schedule with cached alpha cumulative products.

    Timesteps are 1-based: t runs over [1, T], and alpha_bar(t) is the
    product of the first t alphas.  alpha_bar(0) == 1 by convention, which
    makes the final ancestral step deterministic.
    """

    # betas sized for a 50-step toy chain: alpha_bar decays to ~3e-3 at T,
    # so sampling from pure noise matches the training distribution
    def __init__(self, timesteps=50, beta_start=0.02, beta_end=0.2):
        if timesteps < 1:
            raise ScheduleError("need at least one timestep")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ScheduleError(f"betas must satisfy 0 < {beta_start} <= {beta_end} < 1")
        if timesteps > 1 and beta_start == beta_end:
            raise ScheduleError("beta schedule must increase")
        self.timesteps = int(timesteps)
        self.betas = np.linspace(beta_start, beta_end, self.timesteps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ScheduleError("alpha_bar must decrease strictly")

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ScheduleError(f"timestep {t} outside [1, {self.timesteps}]")
        return t

    def beta(self, t):
        return self.betas[self._check_t(t) - 1]

    def alpha(self, t):
        return self.alphas[self._check_t(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[self._check_t(t) - 1]

    def posterior_variance(self, t):
        """Variance of the reverse step; exactly 0 at t=1 (alpha_bar(0)=1)."""
        t = self._check_t(t)
        prev = np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)
        return (1.0 - prev) / (1.0 - self.alpha_bars[t - 1]) * self.betas[t - 1]


@dataclass
class DecoderConfig:
    frames: int = 8
    channels: int = 3
    height: int = 16
    width: int = 16
    d_cond: int = 64
    hidden: int = 128

    def validate(self):
        for field in ("frames", "channels", "height", "width", "d_cond", "hidden"):
            if getattr(self, field) < 1:
                raise DimensionError(f"DecoderConfig.{field} must be positive")
        return self

    @property
    def clip_shape(self):
        return (self.frames, self.channels, self.height, self.width)

    @property
    def frame_size(self):
        return self.channels * self.height * self.width


def check_clip(arr, cfg: DecoderConfig, clean=False):
    """Validate a clip array against the config; returns the array."""
    arr = np.asarray(arr)
    if arr.shape[-4:] != cfg.clip_shape:
        raise DimensionError(f"clip shape {arr.shape} does not end in {cfg.clip_shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError("clip contains non-finite values")
    if clean and (arr.min() < -1.0 or arr.max() > 1.0):
        raise DimensionError("clean clips must lie in [-1, 1]")
    return arr


def timestep_embedding(t, dim):
    """Standard sinusoidal embedding of integer timesteps; [dim] or [B, dim]."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(T.DEFAULT_DTYPE)


class Denoiser:
    """Noise predictor conditioned on fused tokens and a timestep."""

    def __init__(self, cfg: DecoderConfig, rng: T.Rng):
        cfg.validate()
        self.cfg = cfg
        h = cfg.hidden
        self.enc = T.Linear("denoiser.enc", cfg.frame_size, h, rng.split("enc"))
        self.ln1_gain = T.Parameter("denoiser.ln1.gain", np.ones(h))
        self.ln1_bias = T.Parameter("denoiser.ln1.bias", np.zeros(h))
        self.attn = T.AttentionParams.create(
            "denoiser.attn", h, cfg.d_cond, h, rng.split("attn"))
        self.ln2_gain = T.Parameter("denoiser.ln2.gain", np.ones(h))
        self.ln2_bias = T.Parameter("denoiser.ln2.bias", np.zeros(h))
        self.fc1 = T.Linear("denoiser.fc1", h, 2 * h, rng.split("fc1"))
        self.fc2 = T.Linear("denoiser.fc2", 2 * h, h, rng.split("fc2"))
        self.dec = T.Linear("denoiser.dec", h, cfg.frame_size, zero_init=True)
        # timestep-gated input skip; without it the hidden bottleneck caps
        # how much of the noise the decoder path can ever predict
        self.skip = T.Linear("denoiser.skip", h, 1, zero_init=True)

    def __call__(self, y_t, cond_tokens, t):
        """Predict the noise in y_t; accepts [F,C,H,W] or [B,F,C,H,W]."""
        y_t, cond_tokens = T.astensor(y_t), T.astensor(cond_tokens)
        if y_t.shape[-4:] != self.cfg.clip_shape:
            raise DimensionError(
                f"clip shape {y_t.shape} does not end in {self.cfg.clip_shape}")
        if cond_tokens.shape[-1] != self.cfg.d_cond:
            raise DimensionError(
                f"cond width {cond_tokens.shape[-1]} != {self.cfg.d_cond}")
        batched = y_t.ndim == 5
        lead = y_t.shape[:-4]
        flat = T.reshape(y_t, lead + (self.cfg.frames, self.cfg.frame_size))
        temb = timestep_embedding(t, self.cfg.hidden)
        coef = self.skip(T.Tensor(temb if temb.ndim == 2 else temb[None]))
        if temb.ndim == 1:
            coef = T.reshape(coef, (1, 1, 1, 1))
        else:
            coef = T.reshape(coef, (coef.shape[0], 1, 1, 1, 1))
        if batched and temb.ndim == 2:
            temb = temb[:, None, :]
        x = T.add(self.enc(flat), T.Tensor(temb))
        h = T.layer_norm(x, self.ln1_gain, self.ln1_bias)
        x = T.add(x, T.cross_attention(h, cond_tokens, self.attn))
        h = T.layer_norm(x, self.ln2_gain, self.ln2_bias)
        x = T.add(x, self.fc2(T.gelu(self.fc1(h))))
        return T.add(T.reshape(self.dec(x), y_t.shape), T.mul(y_t, coef))

    def named_parameters(self):
        out = self.enc.named_parameters()
        out += [(self.ln1_gain.name, self.ln1_gain), (self.ln1_bias.name, self.ln1_bias)]
        out += self.attn.named_parameters()
        out += [(self.ln2_gain.name, self.ln2_gain), (self.ln2_bias.name, self.ln2_bias)]
        out += self.fc1.named_parameters() + self.fc2.named_parameters()
        out += self.dec.named_parameters() + self.skip.named_parameters()
        return out


def _noise_coefs(t, schedule, ndim, dtype):
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    shape = ab.shape + (1,) * (ndim - ab.ndim)
    return (np.sqrt(ab).reshape(shape).astype(dtype),
            np.sqrt(1.0 - ab).reshape(shape).astype(dtype))


def add_noise(y0, epsilon, t, schedule: NoiseSchedule):
    """y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * epsilon.

    `t` is a scalar for single clips or one timestep per batch item.
    """
    y0, epsilon = T.astensor(y0), T.astensor(epsilon)
    if y0.shape != epsilon.shape:
        raise DimensionError(f"noise shape {epsilon.shape} != clip shape {y0.shape}")
    sa, sb = _noise_coefs(t, schedule, y0.ndim, y0.data.dtype)
    return T.add(T.mul(y0, sa), T.mul(epsilon, sb))


def diffusion_loss(y0, cond_tokens, model: Denoiser, rng, schedule,
                   t=None, eps=None):
    """Mean squared error between sampled and predicted noise.

    Timesteps are drawn uniformly per batch item and the noise is unit
    Gaussian; both can be frozen through `t` / `eps` for gradient checks.
    """
    y0 = T.astensor(y0)
    if t is None:
        if y0.ndim == 5:
            t = rng.integers(1, schedule.timesteps + 1, size=y0.shape[0])
        else:
            t = int(rng.integers(1, schedule.timesteps + 1))
    if eps is None:
        eps = rng.normal(y0.shape).astype(y0.data.dtype)
    eps = T.astensor(eps)
    y_t = add_noise(y0, eps, t, schedule)
    pred = model(y_t, cond_tokens, t)
    return T.tmean(T.square(T.sub(eps, pred)))


def sample(cond_tokens, model: Denoiser, schedule: NoiseSchedule, rng):
    """Ancestral reverse diffusion from pure noise; returns an [F,C,H,W] clip.

    Each step clamps the implied clean clip to [-1, 1] before forming the
    reverse-step mean, which keeps the tiny denoiser's trajectories bounded
    when they stray from the training manifold; the final step adds no noise.
    """
    cfg = model.cfg
    y = rng.normal(cfg.clip_shape).astype(T.DEFAULT_DTYPE)
    with T.no_grad():
        for t in range(schedule.timesteps, 0, -1):
            eps_hat = model(T.Tensor(y), cond_tokens, t).data
            a, b = float(schedule.alpha(t)), float(schedule.beta(t))
            ab = float(schedule.alpha_bar(t))
            ab_prev = float(schedule.alpha_bar(t - 1)) if t > 1 else 1.0
            x0 = (y - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
            x0 = np.clip(x0, -1.0, 1.0)
            y = (math.sqrt(ab_prev) * b * x0
                 + math.sqrt(a) * (1.0 - ab_prev) * y) / (1.0 - ab)
            if t > 1:
                sigma = math.sqrt(float(schedule.posterior_variance(t)))
                y = y + sigma * rng.normal(cfg.clip_shape).astype(y.dtype)
            if not np.all(np.isfinite(y)):
                raise SamplingError(f"sampling diverged at timestep {t}")
    return np.clip(y, -1.0, 1.0)
