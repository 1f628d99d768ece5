"""Noise schedules.

Arrays are stored 1-indexed: element 0 is a sentinel (beta 0, alpha 1,
gamma 1) so ``gamma[t - 1]`` is valid for every step t = 1..T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

KINDS = ("linear", "cosine", "custom")
COSINE_MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    gamma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        beta = np.array(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2 or beta[0] != 0.0:
            raise ValueError("beta must be 1-indexed with beta[0] == 0 and at least one step")
        if np.any(beta[1:] <= 0) or np.any(beta[1:] >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        gamma = np.empty_like(alpha)
        gamma[0] = 1.0
        for t in range(1, alpha.size):
            gamma[t] = gamma[t - 1] * alpha[t]
        for name, arr in (("beta", beta), ("alpha", alpha), ("gamma", gamma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    @classmethod
    def from_betas(cls, kind: str, betas) -> "NoiseSchedule":
        """Build from the T per-step betas (beta_1..beta_T)."""
        return cls(kind, np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)]))


def make_linear(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas("linear", np.linspace(beta_start, beta_end, T))


def make_cosine(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: gamma(t) = f(t)/f(0), f(t) = cos^2((t/T + s)/(1 + s) * pi/2)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if s <= 0:
        raise ValueError("offset s must be positive")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.minimum(1.0 - f[1:] / f[:-1], COSINE_MAX_BETA)
    return NoiseSchedule.from_betas("cosine", betas)


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Coarser schedule visiting ``steps`` evenly spaced noise levels of ``sched``.

    Used for reduced-cost sampling; the denoiser is conditioned on gamma
    itself, so it can be queried on any subset of the original levels.
    """
    if steps >= sched.T:
        return sched
    if steps < 1:
        raise ValueError("steps must be >= 1")
    idx = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))
    g = np.concatenate([[1.0], sched.gamma[idx]])
    return NoiseSchedule.from_betas("custom", 1.0 - g[1:] / g[:-1])


def sample_gamma(sched: NoiseSchedule, rng: Rng) -> tuple[float, int]:
    """Draw t uniformly from 1..T, then gamma uniformly on [gamma[t], gamma[t-1])."""
    t = int(rng.integers(1, sched.T + 1))
    u = float(rng.uniform())
    lo, hi = sched.gamma[t], sched.gamma[t - 1]
    return lo + u * (hi - lo), t
