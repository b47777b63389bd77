"""Diffusion noise schedule and forward (noising) process.

Uses the squared-cosine cumulative schedule: with f(u) = cos^2(((u/T + s) /
(1 + s)) * pi/2) and s = 0.008, the cumulative signal level is
alpha_bar[t] = f(t + 1) / f(0). Per-step betas are derived from consecutive
ratios, clipped to at most 0.999 to keep late steps sane, and alpha_bar is
then recomputed from the clipped betas so the two stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

COSINE_OFFSET = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-timestep quantities, float64 throughout."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1D array")
        if (betas <= 0).any() or (betas > BETA_MAX).any():
            raise ValueError(f"betas must lie in (0, {BETA_MAX}]")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0]


def build_cosine_schedule(timesteps: int, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    u = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((u / timesteps + offset) / (1.0 + offset)) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    betas = np.clip(betas, 1e-12, BETA_MAX)
    return NoiseSchedule(betas=betas)


def forward_diffuse(
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Noise clean images to timestep ``t``: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is a scalar int or a 1D tensor with one timestep per batch element.
    """
    alpha_bars = torch.from_numpy(schedule.alpha_bars).to(x0.dtype)
    if isinstance(t, int):
        t = torch.tensor([t], dtype=torch.long)
    if (t < 0).any() or (t >= schedule.timesteps).any():
        raise ValueError(f"timestep out of range [0, {schedule.timesteps})")
    ab = alpha_bars[t].reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def timestep_subsequence(timesteps: int, n_steps: int) -> np.ndarray:
    """Descending subsequence of timesteps from T-1 to 0 for strided sampling.

    Endpoints are always included; interior points are evenly spaced and
    rounded. Requesting more steps than exist just returns every timestep.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps == 1:
        return np.array([timesteps - 1], dtype=np.int64)
    n_steps = min(n_steps, timesteps)
    seq = np.round(np.linspace(timesteps - 1, 0, n_steps)).astype(np.int64)
    # rounding can duplicate neighbours when n_steps is close to timesteps
    return np.unique(seq)[::-1].copy()
