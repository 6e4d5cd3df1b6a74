"""
NOISE SCHEDULE - Variance schedule, forward diffusion and DDIM update rules
===========================================================================
Index convention: alphas_cum[0] = 1 (clean data) and alphas_cum[t] is the
cumulative product of (1 - beta_i) for i <= t, t = 1..T.

    forward:     z_t    = sqrt(a_t) z_0 + sqrt(1 - a_t) eps
    DDIM down:   z_prev = r z_t + (sqrt(1 - a_prev) - r sqrt(1 - a_t)) eps,   r = sqrt(a_prev) / sqrt(a_t)
    DDIM up:     z_next = r z_t + (sqrt(1 - a_next) - r sqrt(1 - a_t)) eps,   r = sqrt(a_next) / sqrt(a_t)

Both DDIM directions are the same affine map with the two alphas swapped.
Writing the coefficient through r keeps the equal-alpha case an exact no-op.
"""

from dataclasses import dataclass
from typing import List, Union

import torch

from errors import ConfigError, ShapeMismatchError

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas_cum: torch.Tensor

    def __post_init__(self):
        if self.betas.dim() != 1 or self.betas.numel() < 1:
            raise ConfigError("betas must be a non-empty vector")
        if not torch.all((self.betas > 0) & (self.betas < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        if self.alphas_cum.numel() != self.betas.numel() + 1 or float(self.alphas_cum[0]) != 1.0:
            raise ConfigError("alphas_cum must have T + 1 entries starting at 1")
        if not torch.all(self.alphas_cum[1:] < self.alphas_cum[:-1]):
            raise ConfigError("alphas_cum must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    def alpha(self, t: Timestep) -> torch.Tensor:
        return self.alphas_cum[torch.as_tensor(t, dtype=torch.long)]


def make_schedule(T: int, beta_lo: float = 1e-4, beta_hi: float = 0.02) -> NoiseSchedule:
    """Linear betas over T steps, alphas as the exact cumulative product (float64)."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    if not 0 < beta_lo <= beta_hi < 1:
        raise ConfigError(f"need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}")
    betas = torch.linspace(beta_lo, beta_hi, T, dtype=torch.float64)
    alphas_cum = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(betas, alphas_cum)


def ddim_timesteps(schedule: NoiseSchedule, steps: int) -> List[int]:
    """Uniform-stride sampling timesteps, descending, ending at 0."""
    if not 1 <= steps <= schedule.T:
        raise ConfigError(f"ddim steps must be in [1, {schedule.T}], got {steps}")
    stride = schedule.T // steps
    return [stride * k for k in range(steps, 0, -1)] + [0]


def _broadcast(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    a = a.to(like.dtype)
    return a.view(-1, *([1] * (like.dim() - 1))) if a.dim() == 1 else a


def forward_diffuse(z0: torch.Tensor, t: Timestep, schedule: NoiseSchedule,
                    noise: torch.Tensor) -> torch.Tensor:
    """Closed-form q(z_t | z_0) draw with caller-supplied noise."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ShapeMismatchError(f"timestep outside [1, {schedule.T}]")
    if noise.shape != z0.shape:
        raise ShapeMismatchError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    a = _broadcast(schedule.alphas_cum[t], z0)
    return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * noise


def ddim_transition(z_t: torch.Tensor, a_from: torch.Tensor, a_to: torch.Tensor,
                    eps_hat: torch.Tensor) -> torch.Tensor:
    a_from = a_from.to(z_t.dtype)
    a_to = a_to.to(z_t.dtype)
    r = torch.sqrt(a_to) / torch.sqrt(a_from)
    return r * z_t + (torch.sqrt(1.0 - a_to) - r * torch.sqrt(1.0 - a_from)) * eps_hat


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
              eps_hat: torch.Tensor) -> torch.Tensor:
    """Deterministic DDIM update z_t -> z_{t_prev} for a given noise estimate."""
    if eps_hat.shape != z_t.shape:
        raise ShapeMismatchError(f"noise estimate {tuple(eps_hat.shape)} != latent {tuple(z_t.shape)}")
    return ddim_transition(z_t, schedule.alpha(t), schedule.alpha(t_prev), eps_hat)


def ddim_inverse_step(z_t: torch.Tensor, t: int, t_next: int, schedule: NoiseSchedule,
                      eps_hat: torch.Tensor) -> torch.Tensor:
    """Inversion update z_t -> z_{t_next} (t_next > t)."""
    if eps_hat.shape != z_t.shape:
        raise ShapeMismatchError(f"noise estimate {tuple(eps_hat.shape)} != latent {tuple(z_t.shape)}")
    return ddim_transition(z_t, schedule.alpha(t), schedule.alpha(t_next), eps_hat)
