"""PSNR / SSIM, protocol benchmarks and the CDP ablation table."""
from __future__ import annotations

import csv
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .config import ConfigError
from .data import to_tensor
from .degradation import DegradationSpec, bicubic_up, degrade, make_protocol_grid, modcrop, read_png
from .training import Checkpoint, infer, load_model, require_inference_ready

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
REPORT_COLUMNS = ["model", "spec", "scale", "kernel_type", "width", "sigma1", "sigma2", "theta", "noise_level", "image", "psnr", "ssim"]


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1], returned in [16/255, 235/255]."""
    img = np.asarray(img, dtype=np.float64)
    return (16.0 + img @ np.array([65.481, 128.553, 24.966])) / 255.0


def _prepare(a, b, border_crop, space):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if space == "y":
        a, b = rgb_to_y(a), rgb_to_y(b)
    elif space != "rgb":
        raise ConfigError(f"metric space must be 'y' or 'rgb', got {space!r}")
    if border_crop:
        c = border_crop
        a, b = a[c:-c, c:-c], b[c:-c, c:-c]
    return a, b


def psnr(a, b, border_crop: int = 0, space: str = "y") -> float:
    """10 log10(1 / MSE) for [0, 1] data, capped at 100 dB."""
    a, b = _prepare(a, b, border_crop, space)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_2d(x, y, win, c1, c2):
    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b, border_crop: int = 0, space: str = "y") -> float:
    """Windowed SSIM: 11x11 Gaussian (sigma 1.5), K1 = 0.01, K2 = 0.03, data range 1.

    Statistics are taken over valid window positions only. In RGB space the per-channel
    values are averaged.
    """
    a, b = _prepare(a, b, border_crop, space)
    win = _gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    if min(a.shape[:2]) < win.shape[0]:
        raise ValueError(f"image {a.shape[:2]} smaller than the 11x11 SSIM window")
    if a.ndim == 2:
        return _ssim_2d(a, b, win, c1, c2)
    return float(np.mean([_ssim_2d(a[..., ch], b[..., ch], win, c1, c2) for ch in range(a.shape[2])]))


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class MetricReport:
    model_id: str
    protocol: str
    scale: int
    space: str
    config_hash: str = ""
    git_revision: str = ""
    rows: list[dict] = field(default_factory=list)
    skipped: int = 0

    def aggregates(self) -> list[dict]:
        """Arithmetic mean of per-image values, one entry per degradation spec."""
        groups: dict[str, list[dict]] = {}
        for r in self.rows:
            groups.setdefault(r["spec"], []).append(r)
        out = []
        for key, rs in groups.items():
            meta = {k: rs[0][k] for k in REPORT_COLUMNS if k not in ("image", "psnr", "ssim")}
            meta.update(
                images=len(rs),
                psnr=float(np.mean([r["psnr"] for r in rs])),
                ssim=float(np.mean([r["ssim"] for r in rs])),
            )
            out.append(meta)
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["aggregates"] = self.aggregates()
        return d

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def load_images(dataset_dir) -> tuple[list[tuple[str, np.ndarray]], int]:
    files = sorted(Path(dataset_dir).glob("*.png"))
    images, skipped = [], 0
    for f in files:
        try:
            images.append((f.name, read_png(f)))
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", f, e)
            skipped += 1
    if not images:
        raise FileNotFoundError(f"no readable PNG images in {dataset_dir}")
    return images, skipped


class Predictor:
    """Maps (LR image, HR image) to an SR image. HR is only used by oracle modes."""

    def __init__(self, mode: str, model=None, scale: int = 4, seed: int = 0, model_id: str | None = None):
        if mode not in ("model", "copy-hr", "bicubic"):
            raise ValueError(f"unknown predictor mode {mode!r}")
        self.mode, self.model, self.scale, self.seed = mode, model, scale, seed
        self.model_id = model_id or mode

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, seed=0, model_id=None):
        require_inference_ready(ckpt)
        return cls("model", load_model(ckpt), ckpt.config.model.scale, seed, model_id or ckpt.config.model.variant)

    def __call__(self, lr, hr):
        if self.mode == "copy-hr":
            return hr
        if self.mode == "bicubic":
            return np.clip(bicubic_up(lr, hr.shape[0] // lr.shape[0]), 0, 1)
        return infer(lr, self.model, self.seed)


def run_benchmark(
    predictor: Predictor,
    images,
    protocol: str = "isotropic_noisefree",
    scale: int = 4,
    space: str = "y",
    seed: int = 0,
    specs: list[DegradationSpec] | None = None,
    config_hash: str = "",
    out_dir: str | Path | None = None,
) -> MetricReport:
    """Degrade every image under every protocol spec, super-resolve and score.

    ``images`` is a dataset directory or a list of (name, HR array) pairs.
    """
    skipped = 0
    if isinstance(images, (str, Path)):
        images, skipped = load_images(images)
    if not images:
        raise ValueError("empty dataset")
    if specs is None:
        specs = make_protocol_grid(protocol, scale)
    report = MetricReport(predictor.model_id, protocol, scale, space, config_hash, git_revision(), skipped=skipped)
    for si, spec in enumerate(specs):
        for ii, (name, hr) in enumerate(images):
            s = int(spec.scale)
            spec_i = DegradationSpec(**{**spec.to_dict(), "seed": seed + 1000 * si + ii})
            hr = modcrop(hr, s)
            lr = degrade(hr, spec_i)
            sr = predictor(lr, hr)
            report.rows.append(
                {
                    "model": predictor.model_id,
                    "spec": spec.label(),
                    "scale": s,
                    "kernel_type": spec.kernel_type,
                    "width": spec.width,
                    "sigma1": spec.sigma1,
                    "sigma2": spec.sigma2,
                    "theta": spec.theta,
                    "noise_level": spec.noise_level,
                    "image": name,
                    "psnr": psnr(sr, hr, s, space),
                    "ssim": ssim(sr, hr, s, space),
                }
            )
    if out_dir is not None:
        report.write(out_dir)
    return report


def prior_invariance(ckpt: Checkpoint, lr: np.ndarray, seed: int = 0) -> bool:
    """True when the SR output is bit-identical under two different prior vectors."""
    model = load_model(ckpt)
    model.eval()
    dtype = next(model.parameters()).dtype
    x = to_tensor([lr], dtype)
    gen = torch.Generator().manual_seed(seed)
    z1 = torch.zeros(1, ckpt.config.model.cz, dtype=dtype)
    z2 = torch.randn(1, ckpt.config.model.cz, generator=gen, dtype=dtype) * 10
    with torch.no_grad():
        return bool(torch.equal(model.sr(x, z1), model.sr(x, z2)))


@dataclass
class AblationTable:
    rows: list[dict]
    columns: list[str]
    model1_prior_invariant: bool
    ordering_holds: bool

    def write(self, out_dir, stem="ablation"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        payload = {
            "rows": self.rows,
            "model1_prior_invariant": self.model1_prior_invariant,
            "ordering_model4_ge_model2_model3_ge_model1": self.ordering_holds,
            "git_revision": git_revision(),
        }
        (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_ablation(checkpoints: dict[str, Checkpoint], images, widths=(1.2, 2.4), scale=4, space="y", seed=0) -> AblationTable:
    """PSNR/SSIM of model1..model4 at two isotropic widths.

    The ordering flag is indicative only.
    """
    variants = ["model1", "model2", "model3", "model4"]
    missing = [v for v in variants if v not in checkpoints]
    if missing:
        raise ValueError(f"ablation needs checkpoints for {variants}; missing {missing}")
    if isinstance(images, (str, Path)):
        images, _ = load_images(images)
    specs = [DegradationSpec("isotropic", width=w, scale=scale) for w in widths]
    rows = []
    for v in variants:
        ckpt = checkpoints[v]
        if ckpt.config.model.variant != v:
            raise ValueError(f"checkpoint given for {v} was trained as {ckpt.config.model.variant}")
        pred = Predictor.from_checkpoint(ckpt, seed, v)
        rep = run_benchmark(pred, images, scale=scale, space=space, seed=seed, specs=specs)
        agg = {round(a["width"], 6): a for a in rep.aggregates()}
        row = {"variant": v}
        for w in widths:
            row[f"psnr_w{w:g}"] = agg[round(w, 6)]["psnr"]
            row[f"ssim_w{w:g}"] = agg[round(w, 6)]["ssim"]
        rows.append(row)
    first_lr = degrade(modcrop(images[0][1], scale), specs[0])
    invariant = prior_invariance(checkpoints["model1"], first_lr, seed)
    p = {r["variant"]: r[f"psnr_w{widths[0]:g}"] for r in rows}
    ordering = p["model4"] >= max(p["model2"], p["model3"]) >= p["model1"]
    columns = ["variant"] + [f"{m}_w{w:g}" for w in widths for m in ("psnr", "ssim")]
    return AblationTable(rows, columns, invariant, ordering)
