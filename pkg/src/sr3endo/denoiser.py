"""Conditional U-Net noise predictor f(x, y_t, gamma).

The network sees the bicubic-upsampled condition and the noisy target
concatenated along channels (6 channels in, 3 out) and is conditioned on the
noise level through a sinusoidal embedding of sqrt(gamma) that drives a
per-block scale/shift (FiLM).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

# multiplies sqrt(gamma) before the sinusoids so the highest frequency spans
# roughly a thousand radians over (0, 1]
EMBED_SCALE = 1000.0
GN_EPS = 1e-5


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 8, 16)
    res_blocks_per_level: int = 1
    attention_resolutions: tuple = ()
    dropout_p: float = 0.0
    groups: int = 16
    gamma_embed_dim: int = 64
    image_size: int = 512
    in_channels: int = 6
    out_channels: int = 3

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(sorted(int(r) for r in self.attention_resolutions))
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive ints")
        if self.base_channels < 1 or self.groups < 1:
            raise ValueError("base_channels and groups must be positive")
        if self.base_channels % self.groups:
            raise ValueError(f"base_channels={self.base_channels} is not divisible by groups={self.groups}")
        if self.res_blocks_per_level < 1:
            raise ValueError("res_blocks_per_level must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.gamma_embed_dim < 2 or self.gamma_embed_dim % 2:
            raise ValueError("gamma_embed_dim must be a positive even number")
        if self.image_size % (2 ** (self.levels - 1)):
            raise ValueError(f"image_size {self.image_size} is not divisible by 2^{self.levels - 1}")
        for r in self.attention_resolutions:
            if r not in self.resolutions():
                log.warning("attention resolution %d is not produced for %d-pixel inputs; ignored",
                            r, self.image_size)
        if self.in_channels != 2 * self.out_channels:
            raise ValueError("in_channels must be twice out_channels (condition + noisy target)")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def resolutions(self) -> list[int]:
        """Spatial size at each level for ``image_size`` inputs."""
        return [self.image_size // 2 ** i for i in range(self.levels)]

    def attention_levels(self) -> set[int]:
        return {i for i, r in enumerate(self.resolutions()) if r in self.attention_resolutions}


def gamma_embedding(gamma, dim: int) -> np.ndarray:
    """Sinusoidal embedding of sqrt(gamma): [sin(a*f_k) ..., cos(a*f_k) ...].

    a = EMBED_SCALE * sqrt(gamma), f_k = 10000^(-k/(dim/2)).  Accepts a scalar
    (returns [dim]) or a vector of per-sample levels (returns [N, dim]).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = EMBED_SCALE * np.sqrt(np.atleast_1d(g))[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    return emb[0] if g.ndim == 0 else emb


class Denoiser:
    def __init__(self, config: DenoiserConfig, rng: Rng):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._build()
        del self._rng

    # construction --------------------------------------------------------

    def _param(self, name: str, shape, fan_in: int | None = None, value: float | None = None):
        if value is not None:
            data = np.full(shape, value)
        elif fan_in is None:
            data = np.zeros(shape)
        else:
            data = self._rng.gaussian(shape).astype(np.float64) * math.sqrt(2.0 / fan_in)
        self.params[name] = Tensor(data, requires_grad=True)

    def _conv(self, name, c_in, c_out, k=3, zero=False):
        self._param(f"{name}.w", (c_out, c_in, k, k), None if zero else c_in * k * k)
        self._param(f"{name}.b", (c_out,))

    def _linear(self, name, d_in, d_out):
        self._param(f"{name}.w", (d_in, d_out), d_in)
        self._param(f"{name}.b", (d_out,))

    def _norm(self, name, c):
        self._param(f"{name}.g", (c,), value=1.0)
        self._param(f"{name}.b", (c,))

    def _resblock(self, name, c_in, c_out):
        self._norm(f"{name}.norm1", c_in)
        self._conv(f"{name}.conv1", c_in, c_out)
        self._linear(f"{name}.scale", self.emb_width, c_out)
        self._linear(f"{name}.shift", self.emb_width, c_out)
        self._norm(f"{name}.norm2", c_out)
        self._conv(f"{name}.conv2", c_out, c_out, zero=True)
        if c_in != c_out:
            self._conv(f"{name}.skip", c_in, c_out, k=1)

    def _attention(self, name, c):
        for m in ("q", "k", "v"):
            self.params[f"{name}.w{m}"] = Tensor(
                self._rng.gaussian((c, c)).astype(np.float64) / math.sqrt(c), requires_grad=True)
        self._param(f"{name}.wo", (c, c))

    def _build(self):
        cfg = self.config
        d = cfg.gamma_embed_dim
        self.emb_width = 4 * d
        self._linear("embed.fc1", d, self.emb_width)
        self._linear("embed.fc2", self.emb_width, self.emb_width)
        base = cfg.base_channels
        self._conv("conv_in", cfg.in_channels, base)
        attn = cfg.attention_levels()

        ch = base
        for i, mult in enumerate(cfg.channel_multipliers):
            c_out = base * mult
            for j in range(cfg.res_blocks_per_level):
                self._resblock(f"down.{i}.block.{j}", ch, c_out)
                ch = c_out
                if i in attn:
                    self._attention(f"down.{i}.attn.{j}", ch)
        self._resblock("mid.block.0", ch, ch)
        if cfg.levels - 1 in attn:
            self._attention("mid.attn", ch)
        self._resblock("mid.block.1", ch, ch)
        for i in reversed(range(cfg.levels)):
            c_out = base * cfg.channel_multipliers[i]
            for j in range(cfg.res_blocks_per_level):
                c_in = ch + c_out if j == 0 else c_out
                self._resblock(f"up.{i}.block.{j}", c_in, c_out)
                ch = c_out
                if i in attn:
                    self._attention(f"up.{i}.attn.{j}", ch)
            if i > 0:
                self._conv(f"up.{i}.upsample", ch, ch)
        self._norm("norm_out", ch)
        self._conv("conv_out", ch, cfg.out_channels, zero=True)

    # forward ---------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _apply_conv(self, name, h, padding=1):
        p = self.params
        return T.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], 1, padding)

    def _apply_norm(self, name, h):
        p = self.params
        return T.group_norm(h, self.config.groups, p[f"{name}.g"], p[f"{name}.b"], GN_EPS)

    def _apply_linear(self, name, h):
        p = self.params
        return T.linear(h, p[f"{name}.w"], p[f"{name}.b"])

    def _apply_resblock(self, name, h, emb, training, rng):
        n = h.shape[0]
        r = self._apply_conv(f"{name}.conv1", T.silu(self._apply_norm(f"{name}.norm1", h)))
        c = r.shape[1]
        scale = T.reshape(self._apply_linear(f"{name}.scale", emb), (n, c, 1, 1))
        shift = T.reshape(self._apply_linear(f"{name}.shift", emb), (n, c, 1, 1))
        r = self._apply_norm(f"{name}.norm2", r) * (scale + 1.0) + shift
        r = self._apply_conv(f"{name}.conv2", T.silu(r))
        r = T.dropout(r, self.config.dropout_p, training, rng)
        skip = self._apply_conv(f"{name}.skip", h, 0) if f"{name}.skip.w" in self.params else h
        return skip + r

    def _apply_attention(self, name, h):
        p = self.params
        return T.self_attention(h, p[f"{name}.wq"], p[f"{name}.wk"], p[f"{name}.wv"], p[f"{name}.wo"])

    def predict_eps(self, x_cond, y_t, gamma, training: bool = False, rng: Rng | None = None,
                    skip_hook=None) -> Tensor:
        """Predicted noise for ``y_t`` given the upsampled condition and noise level.

        ``gamma`` is a scalar or one value per sample.  ``skip_hook`` (tests
        only) may replace each skip tensor before it is concatenated.
        """
        x_cond, y_t = T.as_tensor(x_cond), T.as_tensor(y_t)
        if x_cond.shape != y_t.shape:
            raise ValueError(f"condition shape {x_cond.shape} does not match y_t shape {y_t.shape}")
        cfg = self.config
        n, c, hgt, wid = y_t.shape
        if 2 * c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels // 2} image channels, got {c}")
        div = 2 ** (cfg.levels - 1)
        if hgt % div or wid % div:
            raise ValueError(f"spatial size {hgt}x{wid} is not divisible by {div}")
        if training and cfg.dropout_p > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")

        g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
        emb = T.Tensor(gamma_embedding(g, cfg.gamma_embed_dim))
        emb = self._apply_linear("embed.fc2", T.silu(self._apply_linear("embed.fc1", emb)))
        emb = T.silu(emb)

        attn = cfg.attention_levels()
        h = self._apply_conv("conv_in", T.concat([x_cond, y_t], axis=1))
        skips = []
        for i in range(cfg.levels):
            for j in range(cfg.res_blocks_per_level):
                h = self._apply_resblock(f"down.{i}.block.{j}", h, emb, training, rng)
                if i in attn:
                    h = self._apply_attention(f"down.{i}.attn.{j}", h)
            skips.append(h)
            if i < cfg.levels - 1:
                h = T.resample2(h, "down")
        h = self._apply_resblock("mid.block.0", h, emb, training, rng)
        if cfg.levels - 1 in attn:
            h = self._apply_attention("mid.attn", h)
        h = self._apply_resblock("mid.block.1", h, emb, training, rng)
        for i in reversed(range(cfg.levels)):
            s = skips.pop()
            if skip_hook is not None:
                s = skip_hook(i, s)
            h = T.concat([h, s], axis=1)
            for j in range(cfg.res_blocks_per_level):
                h = self._apply_resblock(f"up.{i}.block.{j}", h, emb, training, rng)
                if i in attn:
                    h = self._apply_attention(f"up.{i}.attn.{j}", h)
            if i > 0:
                h = self._apply_conv(f"up.{i}.upsample", T.resample2(h, "up"))
        h = T.silu(self._apply_norm("norm_out", h))
        return self._apply_conv("conv_out", h)

    __call__ = predict_eps


def build(config: DenoiserConfig, rng: Rng) -> Denoiser:
    return Denoiser(config, rng)


def predict_eps(d: Denoiser, x_cond_up, y_t, gamma, training: bool = False, rng: Rng | None = None) -> Tensor:
    return d.predict_eps(x_cond_up, y_t, gamma, training, rng)
