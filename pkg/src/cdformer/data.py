"""HR sources and LR/HR patch batches for training."""
from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch

from .config import DegradationSampling
from .degradation import DegradationSpec, degrade, read_png

log = logging.getLogger(__name__)


def procedural_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth colour field plus a few soft-edged shapes and a stripe patch.

    Stands in for a photo dataset when no HR directory is configured.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.empty((h, w, 3))
    for ch in range(3):
        field = rng.uniform(0.2, 0.8) * np.ones((h, w))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        img[..., ch] = field
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        edge = rng.uniform(0.01, 0.04)
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        mask = 1.0 / (1.0 + np.exp((d - 1.0) / edge))
        colour = rng.uniform(0.0, 1.0, size=3)
        img = img * (1 - mask[..., None]) + colour * mask[..., None]
    # one band of moderate-frequency stripes
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(0.08, 0.2)
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    band = (np.abs(yy - rng.uniform(0.2, 0.8)) < 0.15).astype(np.float64)
    img += 0.12 * band[..., None] * np.sin(2 * np.pi * proj / period)[..., None]
    return np.clip(img, 0.0, 1.0)


def load_hr_dir(path: str | Path) -> list[np.ndarray]:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {path}")
    out = []
    for f in files:
        try:
            out.append(read_png(f))
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", f, e)
    return out


def sample_spec(rng: np.random.Generator, cfg: DegradationSampling, scale: int) -> DegradationSpec:
    noise = float(rng.uniform(*cfg.noise_range)) if cfg.noise_range[1] > cfg.noise_range[0] else float(cfg.noise_range[0])
    seed = int(rng.integers(0, 2**31 - 1))
    if cfg.kernel_type == "none":
        return DegradationSpec("none", kernel_size=cfg.kernel_size, scale=scale, noise_level=noise, seed=seed)
    if cfg.kernel_type == "isotropic":
        width = float(rng.uniform(*cfg.width_range))
        return DegradationSpec("isotropic", width=width, kernel_size=cfg.kernel_size, scale=scale, noise_level=noise, seed=seed)
    s1, s2 = (float(v) for v in rng.uniform(*cfg.sigma_range, size=2))
    theta = float(rng.uniform(0, math.pi))
    return DegradationSpec(
        "anisotropic", sigma1=s1, sigma2=s2, theta=theta, kernel_size=cfg.kernel_size, scale=scale, noise_level=noise, seed=seed
    )


def random_crop(rng: np.random.Generator, img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y : y + size, x : x + size]


def to_tensor(imgs: list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy()).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0)


class PatchSource:
    """Draws (HR, LR) batches.

    With ``fixed > 0`` a fixed set of pairs is built once and iterated in shuffled
    epochs; otherwise each batch draws fresh crops and one DegradationSpec per batch.
    """

    def __init__(self, rng, patch_lr, scale, deg_cfg, batch_size, hr_images=None, fixed=0, dtype=torch.float32):
        self.rng = rng
        self.scale = scale
        self.hr_patch = patch_lr * scale
        self.deg_cfg = deg_cfg
        self.batch_size = batch_size
        self.hr_images = hr_images
        self.dtype = dtype
        self.pairs = None
        if fixed:
            self.pairs = []
            for _ in range(fixed):
                hr = self._hr_patch()
                spec = sample_spec(rng, deg_cfg, scale)
                self.pairs.append((hr, degrade(hr, spec), spec))
            self._order: list[int] = []

    @property
    def steps_per_epoch(self) -> int:
        n = len(self.pairs) if self.pairs is not None else len(self.hr_images or [])
        return max(1, math.ceil(n / self.batch_size)) if n else 1000

    def _hr_patch(self):
        if self.hr_images:
            idx = int(self.rng.integers(0, len(self.hr_images)))
            return random_crop(self.rng, self.hr_images[idx], self.hr_patch)
        return procedural_image(self.rng, self.hr_patch, self.hr_patch)

    def next_batch(self):
        """Returns (hr, lr, ids) with tensors in (B, 3, H, W)."""
        if self.pairs is not None:
            if len(self._order) < self.batch_size:
                self._order += [int(i) for i in self.rng.permutation(len(self.pairs))]
            ids = self._order[: self.batch_size]
            del self._order[: self.batch_size]
            hrs = [self.pairs[i][0] for i in ids]
            lrs = [self.pairs[i][1] for i in ids]
        else:
            spec = sample_spec(self.rng, self.deg_cfg, self.scale)
            hrs = [self._hr_patch() for _ in range(self.batch_size)]
            lrs = [degrade(hr, spec, self.rng) for hr in hrs]
            ids = [f"{spec.label()}#{i}" for i in range(len(hrs))]
        return to_tensor(hrs, self.dtype), to_tensor(lrs, self.dtype), ids

    def all_pairs(self):
        if self.pairs is None:
            raise ValueError("only fixed sources enumerate their pairs")
        return (
            to_tensor([p[0] for p in self.pairs], self.dtype),
            to_tensor([p[1] for p in self.pairs], self.dtype),
        )

    def state(self):
        return {"rng": self.rng.bit_generator.state, "order": list(getattr(self, "_order", []))}

    def load_state(self, st):
        self.rng.bit_generator.state = st["rng"]
        if self.pairs is not None:
            self._order = list(st["order"])
