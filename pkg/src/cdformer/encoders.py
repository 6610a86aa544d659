"""CDP encoders: E_GT (HR + LR -> Z0) and E_LR (LR -> condition vector c)."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Space-to-depth: (B, C, H, W) -> (B, C*s*s, H/s, W/s)."""
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {s}")
    return rearrange(x, "b c (h s1) (w s2) -> b (c s1 s2) h w", s1=s, s2=s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    if x.shape[1] % (s * s):
        raise ValueError(f"channel count {x.shape[1]} not divisible by {s * s}")
    return rearrange(x, "b (c s1 s2) h w -> b c (h s1) (w s2)", s1=s, s2=s)


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class Branch(nn.Module):
    """3x3 stem, residual blocks, global average pool -> (B, width)."""

    def __init__(self, in_ch, width=64, blocks=4):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])

    def forward(self, x):
        x = self.blocks(F.leaky_relu(self.stem(x), 0.1))
        return x.mean(dim=(2, 3))


def _mlp(in_dim, cz):
    return nn.Sequential(nn.Linear(in_dim, cz), nn.LeakyReLU(0.1), nn.Linear(cz, cz))


class GTEncoder(nn.Module):
    """Z0 = E_GT(concat(unshuffle(HR), LR), HR).

    The degradation branch sees the pixel-unshuffled HR stacked with the LR image; the
    content branch sees HR directly. Pooled features are concatenated and fused by a
    two-layer MLP. ``degradation`` / ``content`` switch branches off for ablations.
    """

    def __init__(self, scale, cz=256, width=64, blocks=4, degradation=True, content=True):
        super().__init__()
        if not (degradation or content):
            raise ValueError("E_GT needs at least one branch")
        self.scale = scale
        self.deg_branch = Branch(3 * scale * scale + 3, width, blocks) if degradation else None
        self.content_branch = Branch(3, width, blocks) if content else None
        self.mlp = _mlp(width * (int(degradation) + int(content)), cz)

    def forward(self, hr, lr):
        s = self.scale
        if hr.shape[-2] != s * lr.shape[-2] or hr.shape[-1] != s * lr.shape[-1]:
            raise ValueError(f"HR {tuple(hr.shape[-2:])} is not {s}x LR {tuple(lr.shape[-2:])}")
        feats = []
        if self.deg_branch is not None:
            feats.append(self.deg_branch(torch.cat([pixel_unshuffle(hr, s), lr], dim=1)))
        if self.content_branch is not None:
            feats.append(self.content_branch(hr))
        return self.mlp(torch.cat(feats, dim=1))


class LREncoder(nn.Module):
    """c = E_LR(LR): the degradation branch alone, with a 3-channel stem."""

    def __init__(self, cz=256, width=64, blocks=4):
        super().__init__()
        self.branch = Branch(3, width, blocks)
        self.mlp = _mlp(width, cz)

    def forward(self, lr):
        return self.mlp(self.branch(lr))
