"""Forward noising, the noise-prediction loss, and the ancestral sampler.

Images enter the model in [-1, 1]; storage-domain images in [0, 1] are
converted with :func:`to_model_range` / :func:`from_model_range`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .schedule import NoiseSchedule, sample_gamma
from .tensor import Rng, Tensor


def to_model_range(img01: np.ndarray) -> np.ndarray:
    return 2.0 * img01 - 1.0


def from_model_range(y: np.ndarray) -> np.ndarray:
    return np.clip((y + 1.0) * 0.5, 0.0, 1.0)


@dataclass
class ConditionedBatch:
    """Upsampled low-res condition and high-res target, both [N,3,H,W] in [-1, 1]."""
    x_cond: np.ndarray
    y0: np.ndarray

    def __post_init__(self):
        if self.x_cond.shape != self.y0.shape:
            raise ValueError(f"x_cond {self.x_cond.shape} and y0 {self.y0.shape} differ in shape")
        if self.y0.shape[0] == 0:
            raise ValueError("empty batch")

    def __len__(self):
        return self.y0.shape[0]


def _per_sample(v, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def forward_marginal(y0: np.ndarray, gamma, eps: np.ndarray) -> np.ndarray:
    """sqrt(gamma) * y0 + sqrt(1 - gamma) * eps; gamma may be per sample."""
    if y0.shape != eps.shape:
        raise ValueError(f"y0 {y0.shape} and eps {eps.shape} differ in shape")
    g = _per_sample(gamma, y0.ndim)
    if np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")
    out = np.sqrt(g) * y0 + np.sqrt(1.0 - g) * eps
    return out.astype(y0.dtype, copy=False)


def forward_step(y_prev: np.ndarray, alpha_t: float, eps: np.ndarray) -> np.ndarray:
    """One Markov noising step: sqrt(alpha_t) * y_prev + sqrt(1 - alpha_t) * eps."""
    if y_prev.shape != eps.shape:
        raise ValueError(f"y_prev {y_prev.shape} and eps {eps.shape} differ in shape")
    if not 0 < alpha_t < 1:
        raise ValueError("alpha_t must lie in (0, 1)")
    return (math.sqrt(alpha_t) * y_prev + math.sqrt(1.0 - alpha_t) * eps).astype(y_prev.dtype, copy=False)


def training_loss(denoiser, batch: ConditionedBatch, sched: NoiseSchedule, rng: Rng,
                  p_norm: int = 2, training: bool = True) -> Tensor:
    """Mean |f(x, noisy, gamma) - eps|^p over batch and elements.

    Draw order from ``rng``: (t, u) per sample, then the noise for the whole
    batch, then whatever the denoiser consumes (dropout masks).
    """
    if p_norm not in (1, 2):
        raise ValueError("p_norm must be 1 or 2")
    draws = [sample_gamma(sched, rng) for _ in range(len(batch))]
    gam = np.array([g for g, _ in draws])
    eps = rng.gaussian(batch.y0.shape)
    noisy = forward_marginal(batch.y0, gam, eps)
    pred = denoiser.predict_eps(batch.x_cond, noisy, gam, training=training, rng=rng)
    diff = T.sub(pred, Tensor(eps))
    err = diff * diff if p_norm == 2 else T.absolute(diff)
    return T.mean(err)


def reverse_step(denoiser, x_cond: np.ndarray, y_t: np.ndarray, t: int,
                 sched: NoiseSchedule, rng: Rng, clip_x0: bool = False) -> np.ndarray:
    """y_{t-1} = (y_t - (1-a_t)/sqrt(1-g_t) * f(x, y_t, g_t)) / sqrt(a_t) + sqrt(1-a_t) z.

    With ``clip_x0`` the noise estimate is first projected so that the clean
    image it implies, (y_t - sqrt(1-g_t) f) / sqrt(g_t), lies in [-1, 1].  The
    update itself is unchanged.  This matters for schedules whose last beta is
    close to 1: there 1/sqrt(a_T) is large and any error in f at t = T would
    otherwise be amplified into every later step.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")
    a, g = float(sched.alpha[t]), float(sched.gamma[t])
    with T.no_grad():
        pred = denoiser.predict_eps(x_cond, y_t, g, training=False, rng=None)
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if clip_x0:
        y0_hat = np.clip((y_t - math.sqrt(1.0 - g) * pred) / math.sqrt(g), -1.0, 1.0)
        pred = (y_t - math.sqrt(g) * y0_hat) / math.sqrt(1.0 - g)
    mean = (y_t - (1.0 - a) / math.sqrt(1.0 - g) * pred) / math.sqrt(a)
    if t > 1:
        mean = mean + math.sqrt(1.0 - a) * rng.gaussian(y_t.shape)
    return mean.astype(y_t.dtype, copy=False)


def sample(denoiser, x_cond: np.ndarray, sched: NoiseSchedule, rng: Rng, clip_x0: bool = False) -> np.ndarray:
    """Run all T refinement steps from pure noise; result clamped to [-1, 1]."""
    x_cond = np.asarray(x_cond, dtype=T.get_dtype())
    y = rng.gaussian(x_cond.shape)
    for t in range(sched.T, 0, -1):
        y = reverse_step(denoiser, x_cond, y, t, sched, rng, clip_x0)
    return np.clip(y, -1.0, 1.0)
