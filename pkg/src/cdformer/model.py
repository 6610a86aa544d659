"""The full CDFormer system: E_GT, E_LR, the CDP denoiser and the SR network."""
from __future__ import annotations

import torch
import torch.nn as nn

from .config import RunConfig
from .diffusion import Denoiser, DiffusionSchedule, forward_diffuse, reverse_chain
from .encoders import GTEncoder, LREncoder
from .transformer import SRNet


class MissingComponentError(RuntimeError):
    pass


class CDFormer(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m, d = cfg.model, cfg.diffusion
        self.cfg = cfg
        self.sr = SRNet(m)
        if m.use_prior:
            self.gt_encoder = GTEncoder(
                m.scale,
                m.cz,
                m.encoder_width,
                m.encoder_blocks,
                degradation=m.use_degradation_branch,
                content=m.use_content_branch,
            )
            self.lr_encoder = LREncoder(m.cz, m.encoder_width, m.encoder_blocks)
            self.denoiser = Denoiser(m.cz, d.hidden, d.blocks, d.time_dim)
        else:
            self.gt_encoder = self.lr_encoder = self.denoiser = None
        self.schedule = DiffusionSchedule.linear(d.steps, d.beta_start, d.beta_end)

    @property
    def use_prior(self) -> bool:
        return self.gt_encoder is not None

    def component_params(self) -> dict[str, int]:
        out = {"sr": sum(p.numel() for p in self.sr.parameters())}
        for name in ("gt_encoder", "lr_encoder", "denoiser"):
            mod = getattr(self, name)
            out[name] = 0 if mod is None else sum(p.numel() for p in mod.parameters())
        out["total"] = sum(out.values())
        return out

    def null_prior(self, batch: int, like: torch.Tensor) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.model.cz, dtype=like.dtype, device=like.device)

    def encode_gt(self, hr, lr):
        if not self.use_prior:
            return self.null_prior(lr.shape[0], lr)
        return self.gt_encoder(hr, lr)

    def encode_lr(self, lr):
        if not self.use_prior:
            raise MissingComponentError("model1 has no LR encoder")
        return self.lr_encoder(lr)

    def estimate_prior(self, lr, z_T, generator=None, stochastic=True):
        """Run the reverse chain from ``z_T`` conditioned on E_LR(lr)."""
        c = self.encode_lr(lr)
        noise = None
        if stochastic:
            noise = lambda t: torch.randn(z_T.shape, generator=generator, dtype=z_T.dtype, device=z_T.device)  # noqa: E731
        return reverse_chain(z_T, c, self.schedule, self.denoiser, noise)

    def sample_prior(self, lr, seed: int):
        """Inference CDP: z_T ~ N(0, I), reverse chain conditioned on the LR image."""
        if not self.use_prior:
            return self.null_prior(lr.shape[0], lr)
        gen = torch.Generator(device=lr.device).manual_seed(int(seed))
        z_T = torch.randn(lr.shape[0], self.cfg.model.cz, generator=gen, dtype=lr.dtype, device=lr.device)
        return self.estimate_prior(lr, z_T, gen)

    def diffuse_teacher(self, z0, generator=None):
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
        return forward_diffuse(z0, self.schedule.alpha_bar[-1], eps)

    def forward(self, lr, z):
        return self.sr(lr, z)
