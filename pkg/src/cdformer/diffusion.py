"""Conditional diffusion estimator that recreates the CDP vector from LR information.

The denoiser works on 1-D latents, so the whole T-step reverse chain is cheap enough to
run (and backpropagate through) on every training step.
"""
from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F


class DiffusionSchedule:
    """alpha_t, cumulative alpha_bar_t and sigma_t = sqrt(1 - alpha_t) for t = 1..T.

    Index ``t - 1`` into the tensors for step ``t``.
    """

    def __init__(self, alphas):
        alphas = torch.as_tensor(alphas, dtype=torch.float64)
        if alphas.ndim != 1 or len(alphas) < 1:
            raise ValueError("alphas must be a non-empty 1-D sequence")
        if not bool(((alphas > 0) & (alphas < 1)).all()):
            raise ValueError("every alpha_t must lie in (0, 1)")
        self.sigma = torch.sqrt(1 - alphas)
        # re-derived (within 1 ulp) so that sigma**2 + alpha == 1 holds bit-exactly
        self.alpha = 1 - self.sigma * self.sigma
        self.alpha_bar = torch.cumprod(self.alpha, 0)

    @classmethod
    def linear(cls, steps=4, beta_start=0.1, beta_end=0.99):
        if steps == 1:
            betas = torch.tensor([beta_start], dtype=torch.float64)
        else:
            betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        return cls(1 - betas)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def to_dict(self):
        return {"alpha": self.alpha.tolist()}


def forward_diffuse(z0: torch.Tensor, alpha_bar_T, eps: torch.Tensor) -> torch.Tensor:
    """z_T = sqrt(alpha_bar_T) z0 + sqrt(1 - alpha_bar_T) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = torch.as_tensor(alpha_bar_T, dtype=z0.dtype)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def reverse_chain(
    z_T: torch.Tensor,
    c: torch.Tensor | None,
    schedule: DiffusionSchedule,
    eps_model: Callable,
    noise: Callable[[int], torch.Tensor] | None = None,
    check_finite: bool = True,
) -> torch.Tensor:
    """Run t = T..1 of the reverse update and return the estimate of z0.

    ``eps_model(z_t, t, c)`` predicts the noise; ``t`` is a LongTensor of shape (B,).
    ``noise(t)`` supplies the stochastic term for step t; ``None`` disables it. Step 1
    never adds noise, so the returned estimate is deterministic given z_1.
    """
    z = z_T
    dtype = z.dtype
    for t in range(schedule.T, 0, -1):
        a = schedule.alpha[t - 1].to(dtype)
        ab = schedule.alpha_bar[t - 1].to(dtype)
        tt = torch.full((z.shape[0],), t, dtype=torch.long, device=z.device)
        eps = eps_model(z, tt, c)
        z = (z - (1 - a) / (1 - ab).sqrt() * eps) / a.sqrt()
        if t > 1 and noise is not None:
            z = z + schedule.sigma[t - 1].to(dtype) * noise(t)
        if check_finite and not bool(torch.isfinite(z).all()):
            raise FloatingPointError(f"non-finite latent at reverse step t={t}")
    return z


def diffusion_loss(z0: torch.Tensor, z0_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between teacher and estimated CDP."""
    if z0.shape != z0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(z0_hat.shape)}")
    return (z0 - z0_hat).abs().mean()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """eps_theta(z_t, t, c): residual MLP over concat(z_t, c, time embedding).

    The condition and time embedding are re-injected at every residual block.
    """

    def __init__(self, cz=256, hidden=512, blocks=4, time_dim=64):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.inp = nn.Linear(2 * cz + time_dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Linear(hidden + cz + time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            for _ in range(blocks)
        )
        self.out = nn.Linear(hidden, cz)

    def forward(self, z, t, c):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z.dtype))
        h = self.inp(torch.cat([z, c, temb], dim=-1))
        for blk in self.blocks:
            h = h + blk(torch.cat([F.silu(h), c, temb], dim=-1))
        return self.out(h)
