"""Synthetic LR generation: blur -> bicubic downsample -> additive Gaussian noise.

Images are ``H x W x 3`` float arrays in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
import yaml
from PIL import Image as PILImage
from scipy import ndimage

from .config import ConfigError

KERNEL_SIZE = 21


@dataclass(frozen=True)
class DegradationSpec:
    kernel_type: str = "isotropic"  # isotropic | anisotropic | none
    width: float = 0.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    theta: float = 0.0
    kernel_size: int = KERNEL_SIZE
    scale: int = 4
    noise_level: float = 0.0  # std in 8-bit units
    seed: int = 0

    def validate(self) -> None:
        if self.kernel_type not in ("isotropic", "anisotropic", "none"):
            raise ConfigError(f"unknown kernel_type {self.kernel_type!r}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.kernel_type == "isotropic" and self.width < 0:
            raise ConfigError(f"kernel width must be >= 0, got {self.width}")
        if self.kernel_type == "anisotropic" and (self.sigma1 <= 0 or self.sigma2 <= 0):
            raise ConfigError(f"anisotropic sigmas must be > 0, got {self.sigma1}, {self.sigma2}")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ConfigError(f"scale must be a positive integer, got {self.scale}")
        if self.noise_level < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise_level}")

    def kernel(self) -> np.ndarray | None:
        """The blur kernel, or None when blur is skipped."""
        if self.kernel_type == "none":
            return None
        if self.kernel_type == "isotropic":
            if self.width == 0:
                return None
            return make_isotropic_kernel(self.width, self.kernel_size)
        return make_anisotropic_kernel(self.sigma1, self.sigma2, self.theta, self.kernel_size)

    def label(self) -> str:
        if self.kernel_type == "anisotropic":
            k = f"aniso({self.sigma1:g},{self.sigma2:g},{math.degrees(self.theta):g}deg)"
        elif self.kernel_type == "isotropic":
            k = f"iso{self.width:g}"
        else:
            k = "none"
        return f"x{self.scale}_{k}_n{self.noise_level:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(**d)


def _check_size(size: int) -> None:
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {size}")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="xy")


def make_isotropic_kernel(width: float, size: int = KERNEL_SIZE) -> np.ndarray:
    """Normalized isotropic Gaussian; width 0 gives the delta kernel."""
    _check_size(size)
    if width < 0:
        raise ConfigError(f"kernel width must be >= 0, got {width}")
    if width == 0:
        k = np.zeros((size, size))
        k[size // 2, size // 2] = 1.0
        return k
    xx, yy = _grid(size)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * width**2))
    return k / k.sum()


def make_anisotropic_kernel(sigma1: float, sigma2: float, theta: float, size: int = KERNEL_SIZE) -> np.ndarray:
    """Normalized Gaussian with covariance R(theta) diag(sigma1^2, sigma2^2) R(theta)^T.

    ``theta`` rotates the sigma1 axis counter-clockwise from +x, with x the column index
    and y the row index.
    """
    _check_size(size)
    if sigma1 <= 0 or sigma2 <= 0:
        raise ConfigError(f"anisotropic sigmas must be > 0, got {sigma1}, {sigma2}")
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([sigma1**2, sigma2**2]) @ rot.T
    inv = np.linalg.inv(cov)
    xx, yy = _grid(size)
    pts = np.stack([xx, yy], axis=-1)
    k = np.exp(-0.5 * np.einsum("...i,ij,...j->...", pts, inv, pts))
    return k / k.sum()


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel correlation with reflect (edge not repeated) boundaries."""
    out = np.empty_like(img, dtype=np.float64)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.correlate(img[..., ch].astype(np.float64), kernel, mode="mirror")
    return out


def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax**2, ax**3
    return (1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1) + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``out_len x in_len`` matrix of MATLAB-style bicubic weights.

    Out-of-range taps fold back symmetrically (edge sample repeated), as imresize does.
    """
    kernel_width = 4.0
    shrink = scale < 1 and antialias
    if shrink:
        kernel_width /= scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - kernel_width / 2)
    taps = int(math.ceil(kernel_width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    w = scale * _cubic(dist * scale) if shrink else _cubic(dist)
    w = w / w.sum(axis=1, keepdims=True)
    period = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = period[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.ravel()), w.ravel())
    return mat


def imresize(img: np.ndarray, scale: float, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Bicubic resize with antialiasing when shrinking."""
    h, w = img.shape[:2]
    if out_hw is None:
        out_hw = (int(math.ceil(h * scale)), int(math.ceil(w * scale)))
    mh = resize_matrix(h, out_hw[0], scale)
    mw = resize_matrix(w, out_hw[1], scale)
    return np.einsum("ih,hwc,jw->ijc", mh, img.astype(np.float64), mw)


def modcrop(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % s, : w - w % s]


def bicubic_down(img: np.ndarray, s: int) -> np.ndarray:
    img = modcrop(img, s)
    h, w = img.shape[:2]
    return imresize(img, 1.0 / s, (h // s, w // s))


def bicubic_up(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    return imresize(img, float(s), (h * s, w * s))


def degrade(hr: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """LR = clamp((HR * k) downsampled by s + n).

    ``rng`` overrides the generator seeded from ``spec.seed``.
    """
    spec.validate()
    s = int(spec.scale)
    img = modcrop(np.asarray(hr, dtype=np.float64), s)
    h, w = img.shape[:2]
    assert h % s == 0 and w % s == 0
    k = spec.kernel()
    if k is not None:
        img = blur(img, k)
    if s > 1:
        img = imresize(img, 1.0 / s, (h // s, w // s))
    if spec.noise_level > 0:
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.noise_level / 255.0, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def load_protocols() -> dict:
    text = (resources.files("cdformer") / "protocols.yaml").read_text()
    return yaml.safe_load(text)


def make_protocol_grid(protocol: str, scale: int = 4) -> list[DegradationSpec]:
    cfg = load_protocols()
    size = int(cfg["kernel_size"])
    if protocol == "isotropic_noisefree":
        widths = cfg["isotropic_noisefree"].get(scale)
        if widths is None:
            raise ConfigError(f"no isotropic widths for scale {scale}")
        return [DegradationSpec("isotropic", width=float(wd), kernel_size=size, scale=scale) for wd in widths]
    if protocol == "general":
        g = cfg["general"]
        specs = []
        for noise in g["noise_levels"]:
            for s1, s2, deg in g["kernels"]:
                specs.append(
                    DegradationSpec(
                        "anisotropic",
                        sigma1=float(s1),
                        sigma2=float(s2),
                        theta=math.radians(deg),
                        kernel_size=size,
                        scale=int(g["scale"]),
                        noise_level=float(noise),
                    )
                )
        return specs
    raise ConfigError(f"unknown protocol {protocol!r}; expected isotropic_noisefree or general")


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
