"""Variance-preserving noise schedule and the closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with arrays indexed so that ``alpha_bar[0] = 1``.

    ``betas[t]`` for ``t in [1, T]`` is the per-step variance; index 0 holds
    a zero placeholder.
    """

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        b = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        return np.concatenate([[0.0], b])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar_at(self, t) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bar, dtype=torch.float64)[torch.as_tensor(t, dtype=torch.long)]

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Uniform descending subsequence of ``[1, T]`` that always starts at ``T``."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}]")
        ts = np.round(np.linspace(self.T, 1, steps)).astype(int)
        return [int(t) for t in ts]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per batch item."""
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0")
    ab = schedule.alpha_bar_at(t).to(z0.dtype)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
