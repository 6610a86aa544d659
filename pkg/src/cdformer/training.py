"""Two-stage optimisation, checkpoints and inference.

Stage 1 trains E_GT and the SR net on the reconstruction loss. Stage 2 freezes E_GT and
trains E_LR, the denoiser and the SR net on L_diff + alpha_rec * L_rec, running the full
reverse chain on every step.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_dict
from .data import PatchSource, load_hr_dir, to_image, to_tensor
from .diffusion import DiffusionSchedule, diffusion_loss
from .model import CDFormer, MissingComponentError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_COLUMNS = ["step", "epoch", "l_rec", "l_diff", "total", "lr", "wall_time"]


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_schedule(epoch: int, lr0: float = 1e-4, period: int = 125) -> float:
    return lr0 * 2.0 ** (-(epoch // period))


def reconstruction_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    return (hr - sr).abs().mean()


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(cfg: RunConfig, seed: int | None = None) -> CDFormer:
    if seed is not None:
        torch.manual_seed(seed)
    return CDFormer(cfg).to(dtype=_dtype(cfg), device=cfg.device)


def state_hash(module: torch.nn.Module | None) -> str:
    if module is None:
        return ""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume or deploy a run; serialised as one torch file."""

    config: RunConfig
    stage: int
    step: int
    epoch: int
    params: dict[str, dict]
    optimizer: dict | None = None
    data_state: dict | None = None
    torch_rng: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    def to_blob(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "arch_hash": self.config.arch_hash(),
            "config_hash": self.config.config_hash(),
            "config": self.config.to_dict(),
            "stage": self.stage,
            "step": self.step,
            "epoch": self.epoch,
            "schedule": _schedule(self.config).to_dict(),
            "params": self.params,
            "optimizer": self.optimizer,
            "data_state": self.data_state,
            "torch_rng": self.torch_rng,
            "extra": self.extra,
        }


def _schedule(cfg: RunConfig) -> DiffusionSchedule:
    d = cfg.diffusion
    return DiffusionSchedule.linear(d.steps, d.beta_start, d.beta_end)


def model_params(model: CDFormer, stage: int = 2) -> dict[str, dict]:
    """State dicts of the components trained up to ``stage``; untrained parts are left out."""
    out = {"sr": model.sr.state_dict()}
    names = ("gt_encoder",) if stage == 1 else ("gt_encoder", "lr_encoder", "denoiser")
    for name in names:
        mod = getattr(model, name)
        if mod is not None:
            out[name] = mod.state_dict()
    return out


def _canonical(obj):
    """Intern every string so pickle's identity-based memo depends only on values."""
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    buf = io.BytesIO()
    torch.save(_canonical(ckpt.to_blob()), buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    cfg = from_dict(blob["config"])
    if cfg.arch_hash() != blob["arch_hash"]:
        raise CheckpointError(f"{path}: architecture hash mismatch (file {blob['arch_hash']}, config {cfg.arch_hash()})")
    return Checkpoint(
        config=cfg,
        stage=blob["stage"],
        step=blob["step"],
        epoch=blob["epoch"],
        params=blob["params"],
        optimizer=blob["optimizer"],
        data_state=blob["data_state"],
        torch_rng=blob["torch_rng"],
        extra=blob.get("extra", {}),
    )


def load_model(ckpt: Checkpoint, cfg: RunConfig | None = None) -> CDFormer:
    """Instantiate a model and load every parameter group stored in the checkpoint."""
    cfg = cfg or ckpt.config
    if cfg.arch_hash() != ckpt.config.arch_hash():
        raise CheckpointError(
            f"checkpoint architecture {ckpt.config.arch_hash()} does not match config {cfg.arch_hash()}"
        )
    model = build_model(cfg)
    for name, sd in ckpt.params.items():
        getattr(model, name).load_state_dict(sd)
    return model


# ---------------------------------------------------------------- training


class CSVLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def write(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in LOG_COLUMNS])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: CDFormer
    history: list[dict]
    source: PatchSource


def _trainable(model: CDFormer, cfg: RunConfig, stage: int):
    mods = [model.sr]
    if stage == 1:
        if model.gt_encoder is not None:
            mods.append(model.gt_encoder)
    else:
        mods += [model.lr_encoder, model.denoiser]
        if not cfg.train.freeze_gt_encoder:
            mods.append(model.gt_encoder)
    return [p for m in mods for p in m.parameters()]


def stage1_loss(model: CDFormer, hr, lr):
    z0 = model.encode_gt(hr, lr)
    sr = model.sr(lr, z0)
    l_rec = reconstruction_loss(sr, hr)
    return l_rec, {"l_rec": l_rec.item(), "l_diff": 0.0, "total": l_rec.item()}


def stage2_loss(model: CDFormer, hr, lr, alpha_rec, generator=None, freeze_gt=True):
    if freeze_gt:
        with torch.no_grad():
            z0 = model.gt_encoder(hr, lr)
    else:
        z0 = model.gt_encoder(hr, lr)
    z_T = model.diffuse_teacher(z0, generator)
    z0_hat = model.estimate_prior(lr, z_T, generator)
    l_diff = diffusion_loss(z0, z0_hat)
    sr = model.sr(lr, z0_hat)
    l_rec = reconstruction_loss(sr, hr)
    total = l_diff + alpha_rec * l_rec
    return total, {"l_rec": l_rec.item(), "l_diff": l_diff.item(), "total": total.item()}


def make_source(cfg: RunConfig) -> PatchSource:
    t = cfg.train
    rng = np.random.default_rng(t.seed)
    images = load_hr_dir(t.hr_dir) if t.hr_dir else None
    return PatchSource(
        rng, t.patch_size, cfg.model.scale, t.degradation, t.batch_size, images, t.fixed_patches, _dtype(cfg)
    )


def train(
    cfg: RunConfig,
    init_from: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    source: PatchSource | None = None,
    on_step=None,
) -> TrainResult:
    """Run one training stage (``cfg.train.stage``) and return the final checkpoint.

    Stage 2 needs ``init_from``: a stage-1 checkpoint supplying E_GT (and the SR net).
    ``resume`` continues a run of the same stage from its saved step.
    """
    cfg.validate()
    t = cfg.train
    stage = t.stage
    torch.manual_seed(t.seed)
    model = build_model(cfg)
    if stage == 2:
        if not model.use_prior:
            raise TrainingError("stage 2 is not defined for the no-prior variant (model1)")
        if init_from is None and resume is None:
            raise TrainingError("stage 2 requires a stage-1 checkpoint (--init-from) providing a trained E_GT")
        if init_from is not None:
            if "gt_encoder" not in init_from.params:
                raise TrainingError("--init-from checkpoint has no E_GT parameters")
            model.gt_encoder.load_state_dict(init_from.params["gt_encoder"])
            model.sr.load_state_dict(init_from.params["sr"])
            for name in ("lr_encoder", "denoiser"):
                if name in init_from.params and init_from.stage == 2:
                    getattr(model, name).load_state_dict(init_from.params[name])
        if t.freeze_gt_encoder:
            model.gt_encoder.requires_grad_(False)

    source = source or make_source(cfg)
    params = _trainable(model, cfg, stage)
    opt = torch.optim.Adam(params, lr=t.lr, betas=tuple(t.adam_betas))
    gen = torch.Generator(device=cfg.device).manual_seed(t.seed + 7919 * stage)
    start = 0
    if resume is not None:
        if resume.stage != stage:
            raise TrainingError(f"cannot resume a stage-{resume.stage} checkpoint as stage {stage}")
        for name, sd in resume.params.items():
            getattr(model, name).load_state_dict(sd)
        opt.load_state_dict(resume.optimizer)
        if resume.data_state:
            source.load_state(resume.data_state)
        if resume.torch_rng is not None:
            gen.set_state(resume.torch_rng)
        start = resume.step

    spe = source.steps_per_epoch
    total_steps = t.steps if t.steps is not None else t.epochs * spe
    gt_hash = state_hash(model.gt_encoder)
    logger = CSVLog(log_path)
    history = []
    t0 = time.perf_counter()
    model.train()
    for step in range(start, total_steps):
        epoch = step // spe
        lr_now = lr_schedule(epoch, t.lr, t.lr_halving_period)
        for g in opt.param_groups:
            g["lr"] = lr_now
        hr, lr, ids = source.next_batch()
        if stage == 1:
            loss, parts = stage1_loss(model, hr, lr)
        else:
            loss, parts = stage2_loss(model, hr, lr, t.alpha_rec, gen, t.freeze_gt_encoder)
        if not math.isfinite(parts["total"]):
            raise TrainingError(f"non-finite loss at step {step} (lr={lr_now:g}, batch={ids})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if t.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, t.grad_clip)
        opt.step()
        row = {"step": step + 1, "epoch": epoch, **parts, "lr": lr_now, "wall_time": round(time.perf_counter() - t0, 3)}
        history.append(row)
        if (step + 1) % t.log_every == 0 or step + 1 == total_steps:
            logger.write(row)
        if on_step is not None:
            on_step(row)

    if stage == 2 and t.freeze_gt_encoder and state_hash(model.gt_encoder) != gt_hash:
        raise TrainingError("E_GT parameters changed during stage 2")
    ckpt = Checkpoint(
        config=cfg,
        stage=stage,
        step=total_steps,
        epoch=max(0, total_steps - 1) // spe,
        params=model_params(model, stage),
        optimizer=opt.state_dict(),
        data_state=source.state(),
        torch_rng=gen.get_state(),
        extra={"gt_encoder_hash": state_hash(model.gt_encoder)},
    )
    return TrainResult(ckpt, model, history, source)


# ---------------------------------------------------------------- inference


def require_inference_ready(ckpt: Checkpoint) -> None:
    if not ckpt.config.model.use_prior:
        return
    missing = [n for n in ("lr_encoder", "denoiser") if n not in ckpt.params]
    if ckpt.stage != 2 or missing:
        names = ", ".join(missing or ["stage-2 trained lr_encoder", "denoiser"])
        raise MissingComponentError(f"inference needs a stage-2 checkpoint; missing: {names}")


@torch.no_grad()
def infer_tensor(model: CDFormer, lr: torch.Tensor, seed: int = 0) -> torch.Tensor:
    model.eval()
    z = model.sample_prior(lr, seed)
    return model.sr(lr, z)


def infer(lr_image: np.ndarray, model: CDFormer, seed: int = 0) -> np.ndarray:
    """SR image for one H x W x 3 LR image, clamped to [0, 1]."""
    dtype = next(model.parameters()).dtype
    x = to_tensor([lr_image], dtype)
    out = infer_tensor(model, x, seed)[0]
    return np.clip(to_image(out), 0.0, 1.0)


def infer_from_checkpoint(lr_image: np.ndarray, ckpt: Checkpoint, seed: int = 0) -> np.ndarray:
    require_inference_ready(ckpt)
    return infer(lr_image, load_model(ckpt), seed)


def teacher_sr(hr: torch.Tensor, lr: torch.Tensor, model: CDFormer) -> torch.Tensor:
    """SR using the teacher CDP from E_GT (needs HR, so evaluation only)."""
    with torch.no_grad():
        return model.sr(lr, model.encode_gt(hr, lr))

