"""Latent-space denoising diffusion: cosine noise schedule, closed-form
forward noising, reverse ancestral sampling, and the noise-prediction
training objective.

Timesteps are 1-based; schedule arrays have length T+1 with index 0 holding
the t=0 conventions (beta=0, alpha_bar=1). The reverse process uses the
fixed variance sigma_t = sqrt(beta_t) and adds no noise on the final step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import SamplingError, VolumeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays beta, alpha, alpha_bar, sigma for t = 0..T (index 0 unused for
    beta/sigma)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.T < 2:
            raise VolumeError("schedule needs T >= 2")
        b = self.beta[1:]
        if not np.all((b > 0) & (b < 1)):
            raise VolumeError("beta must lie in (0, 1) for all t")
        if not np.all(np.diff(self.alpha_bar[0:]) < 0):
            raise VolumeError("alpha_bar must be strictly decreasing")

    @property
    def schedule_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.beta.tobytes())
        return h.hexdigest()[:16]


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine signal-retention schedule with betas clipped to 0.999."""
    if T < 2:
        raise VolumeError(f"T must be >= 2, got {T}")
    if not (0 < s < 1):
        raise VolumeError(f"offset s must be in (0, 1), got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * (math.pi / 2)) ** 2
    alpha_bar_raw = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = 1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]
    beta[1:] = np.clip(beta[1:], 1e-8, 0.999)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma)


def _check_t(t, T):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > T):
        raise VolumeError(f"timestep {t} outside [1, {T}]")


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` may be an int (applied to the whole batch) or a per-example 1D
    tensor whose length matches z0's leading dimension.
    """
    if eps.shape != z0.shape:
        raise VolumeError("eps must match z0's shape")
    if isinstance(t, int):
        _check_t(t, sched.T)
        ab = float(sched.alpha_bar[t])
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    t = torch.as_tensor(t, dtype=torch.long)
    _check_t(t.numpy(), sched.T)
    ab = torch.from_numpy(sched.alpha_bar).to(z0.dtype)[t]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    ab = ab.reshape(shape)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def posterior_mean(zt: torch.Tensor, t: int, eps_hat: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """mu = (zt - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    if t < 1:
        raise VolumeError(f"posterior mean undefined at t={t}")
    _check_t(t, sched.T)
    if eps_hat.shape != zt.shape:
        raise VolumeError("eps_hat must match zt's shape")
    a = float(sched.alpha[t])
    b = float(sched.beta[t])
    ab = float(sched.alpha_bar[t])
    return (zt - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)


def p_sample_step(zt: torch.Tensor, t: int, estimator, c, sched: NoiseSchedule,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """One reverse transition z_t -> z_{t-1}; noiseless at t == 1."""
    eps_hat = estimator(zt, t, c)
    if eps_hat.shape != zt.shape:
        raise VolumeError(
            f"estimator output {tuple(eps_hat.shape)} != input {tuple(zt.shape)}"
        )
    mu = posterior_mean(zt, t, eps_hat, sched)
    if t <= 1:
        return mu
    noise = torch.randn(zt.shape, generator=generator, dtype=zt.dtype)
    return mu + float(sched.sigma[t]) * noise


def sample(estimator, shape, c, sched: NoiseSchedule,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """Ancestral sampling from pure noise down to a z0 estimate."""
    z = torch.randn(shape, generator=generator)
    for t in range(sched.T, 0, -1):
        z = p_sample_step(z, t, estimator, c, sched, generator)
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite latent at reverse step t={t}")
    return z


def diffusion_loss(estimator, z0: torch.Tensor, c, sched: NoiseSchedule,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Noise-prediction objective: MSE between drawn and predicted noise,
    with t uniform over [1, T] per example."""
    if not torch.isfinite(z0).all():
        raise VolumeError("non-finite z0")
    B = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = q_sample(z0, t, eps, sched)
    eps_hat = estimator(zt, t, c)
    if eps_hat.shape != zt.shape:
        raise VolumeError("estimator output shape mismatch")
    return torch.mean((eps - eps_hat) ** 2)


@dataclass(frozen=True)
class LatentStats:
    """Per-channel standardization statistics for diffusion latents."""

    mean: torch.Tensor  # (C,)
    std: torch.Tensor   # (C,)

    def standardize(self, features: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (features.ndim - 2) if features.ndim > 4 \
            else (-1,) + (1,) * (features.ndim - 1)
        return (features - self.mean.reshape(shape)) / self.std.reshape(shape)

    def destandardize(self, features: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (features.ndim - 2) if features.ndim > 4 \
            else (-1,) + (1,) * (features.ndim - 1)
        return features * self.std.reshape(shape) + self.mean.reshape(shape)


def compute_latent_stats(feature_list) -> LatentStats:
    """Channel-wise mean/std over a list of (C, h, w, d) latent grids."""
    stacked = torch.stack([f.reshape(f.shape[0], -1) for f in feature_list])
    flat = stacked.movedim(1, 0).reshape(stacked.shape[1], -1)
    mean = flat.mean(dim=1)
    std = flat.std(dim=1).clamp_min(1e-6)
    return LatentStats(mean=mean, std=std)
