"""CDP-guided SR network: stem, residual groups of CDRBs, pixel-shuffle head.

Feature maps are (B, C, H, W). The functional ops take their weights explicitly so they
can be checked against loop oracles; the modules hold the parameters.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import ModelConfig


def channel_layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """LayerNorm over the channel dim of a (B, C, H, W) map, no affine."""
    mu = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


def cdim(feat, z, w_scale, b_scale, w_shift, b_shift):
    """F' = Linear1(z) * Norm(F) + Linear2(z), broadcast over H, W.

    Weights are (C, C_z) as in ``nn.Linear``.
    """
    if w_scale.shape[1] != z.shape[-1] or w_scale.shape[0] != feat.shape[1]:
        raise ValueError(
            f"CDIM weights {tuple(w_scale.shape)} incompatible with C={feat.shape[1]}, C_z={z.shape[-1]}"
        )
    gamma = F.linear(z, w_scale, b_scale)[:, :, None, None]
    beta = F.linear(z, w_shift, b_shift)[:, :, None, None]
    return gamma * channel_layer_norm(feat) + beta


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, wh * ww, C)."""
    wh, ww = window
    return rearrange(x, "b (nh wh) (nw ww) c -> (b nh nw) (wh ww) c", wh=wh, ww=ww)


def window_merge(win: torch.Tensor, window, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    wh, ww = window
    return rearrange(win, "(b nh nw) (wh ww) c -> b (nh wh) (nw ww) c", nh=h // wh, nw=w // ww, wh=wh, ww=ww)


def sw_sa(x, w_q, w_k, w_v, window, heads):
    """Spatial window self-attention on a (B, H, W, C) map.

    Q, K, V = x @ W (no bias); softmax(Q K^T / sqrt(d)) V inside each window and head.
    H and W must already be multiples of the window.
    """
    b, h, w, c = x.shape
    if h % window[0] or w % window[1]:
        raise ValueError(f"map {h}x{w} not divisible by window {tuple(window)}")
    d = c // heads
    win = window_partition(x, window)
    q, k, v = (rearrange(win @ m, "n t (hd d) -> n hd t d", hd=heads) for m in (w_q, w_k, w_v))
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    out = rearrange(attn @ v, "n hd t d -> n t (hd d)")
    return window_merge(out, window, h, w)


def cw_sa(x, w_q, w_k, w_v, heads, alpha):
    """Channel-wise self-attention on a (B, H, W, C) map.

    Per head: A = softmax(Q^T K / alpha) is a (d x d) channel affinity with spatial
    positions as the summed token axis; out = V A^T. ``alpha`` is (heads,) or scalar.
    """
    b, h, w, c = x.shape
    alpha = torch.as_tensor(alpha, dtype=x.dtype, device=x.device)
    if bool((alpha == 0).any()):
        raise FloatingPointError("CW-SA temperature is zero")
    tokens = x.reshape(b, h * w, c)
    q, k, v = (rearrange(tokens @ m, "b n (hd d) -> b hd d n", hd=heads) for m in (w_q, w_k, w_v))
    alpha = alpha.reshape(-1, 1, 1) if alpha.ndim else alpha
    attn = torch.softmax(q @ k.transpose(-2, -1) / alpha, dim=-1)
    out = attn @ v  # b hd d n
    return rearrange(out, "b hd d (h w) -> b h w (hd d)", h=h, w=w)


def interflow_spatial(f_attn, f_conv, spatial, channel):
    """F_attn * S(F_conv) + F_conv * C(F_attn)."""
    if f_attn.shape != f_conv.shape:
        raise ValueError(f"shape mismatch {tuple(f_attn.shape)} vs {tuple(f_conv.shape)}")
    return f_attn * spatial(f_conv) + f_conv * channel(f_attn)


def interflow_channel(f_attn, f_conv, spatial, channel):
    """F_attn * C(F_conv) + F_conv * S(F_attn)."""
    if f_attn.shape != f_conv.shape:
        raise ValueError(f"shape mismatch {tuple(f_attn.shape)} vs {tuple(f_conv.shape)}")
    return f_attn * channel(f_conv) + f_conv * spatial(f_attn)


def _pad_to(x, window):
    """Pad (B, C, H, W) on the bottom/right to window multiples (reflect where possible)."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % window[0], (-w) % window[1]
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class CDIM(nn.Module):
    """Content degradation injection; a plain LayerNorm when the prior is disabled."""

    def __init__(self, channels, cz, use_prior=True):
        super().__init__()
        self.use_prior = use_prior
        if use_prior:
            self.scale = nn.Linear(cz, channels)
            self.shift = nn.Linear(cz, channels)
            # starts near identity modulation
            nn.init.normal_(self.scale.weight, std=0.02)
            nn.init.ones_(self.scale.bias)
            nn.init.normal_(self.shift.weight, std=0.02)
            nn.init.zeros_(self.shift.bias)
        else:
            self.norm = nn.LayerNorm(channels)

    def forward(self, x, z):
        if not self.use_prior:
            return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return cdim(x, z, self.scale.weight, self.scale.bias, self.shift.weight, self.shift.bias)


class SpatialWindowAttention(nn.Module):
    def __init__(self, channels, window, heads):
        super().__init__()
        self.window = tuple(window)
        self.heads = heads
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)

    def forward(self, x):
        h, w = x.shape[-2:]
        xp = _pad_to(x, self.window).permute(0, 2, 3, 1)
        out = sw_sa(xp, self.q.weight.T, self.k.weight.T, self.v.weight.T, self.window, self.heads)
        return out.permute(0, 3, 1, 2)[..., :h, :w]


class ChannelAttention(nn.Module):
    def __init__(self, channels, heads, init_temperature):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        # learned in log space to stay positive
        self.log_temperature = nn.Parameter(torch.full((heads,), math.log(init_temperature)))

    def forward(self, x):
        out = cw_sa(
            x.permute(0, 2, 3, 1),
            self.q.weight.T,
            self.k.weight.T,
            self.v.weight.T,
            self.heads,
            self.log_temperature.exp(),
        )
        return out.permute(0, 3, 1, 2)


class ChannelDistiller(nn.Module):
    """(B, C, H, W) -> (B, C, 1, 1) gate."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return torch.sigmoid(self.conv(x.mean(dim=(2, 3), keepdim=True)))


class SpatialDistiller(nn.Module):
    """(B, C, H, W) -> (B, 1, H, W) gate from channel mean and max."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 7, padding=3)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class FeedForward(nn.Module):
    def __init__(self, channels, expansion=2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CDRB(nn.Module):
    """Content-aware degradation-driven refinement block."""

    def __init__(self, channels, cz, window, heads, init_temperature, ffn_expansion=2.0, use_prior=True):
        super().__init__()
        self.cdims = nn.ModuleList(CDIM(channels, cz, use_prior) for _ in range(4))
        self.swsa = SpatialWindowAttention(channels, window, heads)
        self.cwsa = ChannelAttention(channels, heads, init_temperature)
        self.dconv1 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.dconv2 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.spatial1, self.channel1 = SpatialDistiller(), ChannelDistiller(channels)
        self.spatial2, self.channel2 = SpatialDistiller(), ChannelDistiller(channels)
        self.ffn1 = FeedForward(channels, ffn_expansion)
        self.ffn2 = FeedForward(channels, ffn_expansion)

    def forward(self, x, z):
        h = self.cdims[0](x, z)
        x = interflow_spatial(self.swsa(h), self.dconv1(h), self.spatial1, self.channel1) + x
        x = self.ffn1(self.cdims[1](x, z)) + x
        h = self.cdims[2](x, z)
        x = interflow_channel(self.cwsa(h), self.dconv2(h), self.spatial2, self.channel2) + x
        return self.ffn2(self.cdims[3](x, z)) + x


class ResidualGroup(nn.Module):
    def __init__(self, blocks, channels, **kw):
        super().__init__()
        self.blocks = nn.ModuleList(CDRB(channels, **kw) for _ in range(blocks))
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, z):
        h = x
        for blk in self.blocks:
            h = blk(h, z)
        return self.conv(h) + x


def _upsampler(width, scale):
    layers = []
    if scale == 1:
        return nn.Identity()
    if scale & (scale - 1) == 0:
        for _ in range(int(math.log2(scale))):
            layers += [nn.Conv2d(width, 4 * width, 3, padding=1), nn.PixelShuffle(2)]
    else:
        layers += [nn.Conv2d(width, scale * scale * width, 3, padding=1), nn.PixelShuffle(scale)]
    return nn.Sequential(*layers)


class SRNet(nn.Module):
    """conv stem -> residual groups -> conv + global residual -> pixel-shuffle head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.scale = cfg.scale
        temp = math.sqrt(cfg.temperature_patch[0] * cfg.temperature_patch[1])
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.groups = nn.ModuleList(
            ResidualGroup(
                cfg.blocks_per_group,
                c,
                cz=cfg.cz,
                window=cfg.window,
                heads=cfg.heads,
                init_temperature=temp,
                ffn_expansion=cfg.ffn_expansion,
                use_prior=cfg.use_prior,
            )
            for _ in range(cfg.groups)
        )
        self.body_conv = nn.Conv2d(c, c, 3, padding=1)
        self.head = nn.Sequential(
            nn.Conv2d(c, cfg.head_width, 3, padding=1),
            nn.LeakyReLU(0.1),
            _upsampler(cfg.head_width, cfg.scale),
            nn.Conv2d(cfg.head_width, 3, 3, padding=1),
        )

    def forward(self, lr, z):
        x = self.stem(lr)
        h = x
        for g in self.groups:
            h = g(h, z)
        return self.head(self.body_conv(h) + x)
