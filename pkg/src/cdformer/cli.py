"""Command line entry point: synth, train, infer, eval, ablate, replay.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure. Diagnostics go
to stderr as one JSON object per line.

All randomness derives from ``--seed``; per-item seeds are
``sha256(f"{seed}:{key}")`` truncated to 31 bits (see :func:`derive_seed`).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, builtin_config, load_config

log = logging.getLogger("cdformer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diag("error", "usage", message)
        sys.exit(EXIT_USAGE)


def _diag(level: str, code: str, message: str, **extra) -> None:
    print(json.dumps({"level": level, "code": code, "message": message, **extra}), file=sys.stderr)


def derive_seed(seed: int, key: str) -> int:
    return int(hashlib.sha256(f"{seed}:{key}".encode()).hexdigest()[:8], 16) & 0x7FFFFFFF


def resolve_config(args) -> RunConfig:
    src = args.config or "toy"
    cfg = load_config(src) if Path(src).is_file() else builtin_config(src)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "stage", None) is not None:
        overrides.append(f"train.stage={args.stage}")
    if getattr(args, "device", None):
        overrides.append(f"device={args.device}")
    if getattr(args, "metric_space", None):
        overrides.append(f"metric_space={args.metric_space}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def write_manifest(out: Path, args, cfg: RunConfig | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    argd = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "args": argd,
        "config": cfg.to_dict() if cfg else None,
        "seed": getattr(args, "seed", None),
        "out": str(out),
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    import numpy as np

    from .data import sample_spec
    from .degradation import DegradationSpec, degrade, read_png, write_png

    cfg = resolve_config(args)
    hr_dir, out = Path(args.hr_dir), Path(args.out)
    files = sorted(hr_dir.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG files in {hr_dir}")
    write_manifest(out, args, cfg)
    deg = cfg.train.degradation
    scale = args.scale or cfg.model.scale
    sidecar = {}
    for f in files:
        seed = derive_seed(cfg.train.seed, f.name)
        rng = np.random.default_rng(seed)
        spec = sample_spec(rng, deg, scale)
        overrides = {"seed": seed}
        if args.kernel:
            overrides["kernel_type"] = args.kernel
        if args.width is not None:
            overrides.update(kernel_type=args.kernel or "isotropic", width=args.width)
        if args.noise is not None:
            overrides["noise_level"] = args.noise
        spec = DegradationSpec(**{**spec.to_dict(), **overrides})
        write_png(out / f.name, degrade(read_png(f), spec))
        sidecar[f.name] = spec.to_dict()
    (out / "degradations.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} LR images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_checkpoint, save_checkpoint, train

    cfg = resolve_config(args)
    if cfg.train.stage == 2 and not (args.init_from or args.resume):
        raise UsageError("--stage 2 requires --init-from pointing at a stage-1 checkpoint")
    out = Path(args.out)
    write_manifest(out, args, cfg)
    init = load_checkpoint(args.init_from) if args.init_from else None
    if init is not None and init.stage != 1 and cfg.train.stage == 2 and init.stage != 2:
        raise UsageError("--init-from must be a stage-1 checkpoint")
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train(cfg, init_from=init, resume=resume, log_path=out / f"stage{cfg.train.stage}_log.csv")
    path = out / f"stage{cfg.train.stage}.pt"
    save_checkpoint(res.checkpoint, path)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoint": str(path), "step": res.checkpoint.step, **{k: last.get(k) for k in ("l_rec", "l_diff", "total")}}))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .degradation import read_png, write_png
    from .training import infer, load_checkpoint, load_model, require_inference_ready

    ckpt = load_checkpoint(args.ckpt)
    require_inference_ready(ckpt)
    out = Path(args.out)
    write_manifest(out, args, ckpt.config)
    src = Path(args.input)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no PNG inputs at {src}")
    model = load_model(ckpt)
    ok = 0
    for f in files:
        try:
            lr = read_png(f)
        except OSError as e:
            _diag("warning", "unreadable_input", str(e), path=str(f))
            continue
        write_png(out / f.name, infer(lr, model, args.seed))
        ok += 1
    if ok == 0:
        _diag("error", "no_outputs", "every input failed to load")
        return EXIT_RUNTIME
    print(f"wrote {ok} SR images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import Predictor, run_benchmark
    from .training import load_checkpoint

    if bool(args.ckpt) == bool(args.oracle):
        raise UsageError("eval needs exactly one of --ckpt or --oracle")
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        cfg, chash = ckpt.config, ckpt.config.config_hash()
        pred = Predictor.from_checkpoint(ckpt, args.seed)
        scale = args.scale or cfg.model.scale
        space = args.metric_space or cfg.metric_space
    else:
        scale = args.scale or 4
        space = args.metric_space or "y"
        chash = ""
        pred = Predictor(args.oracle, scale=scale, seed=args.seed)
    out = Path(args.out)
    write_manifest(out, args, None)
    report = run_benchmark(pred, args.data, args.protocol, scale, space, args.seed, config_hash=chash, out_dir=out)
    for a in report.aggregates():
        print(f"{a['spec']:40s} PSNR {a['psnr']:7.3f}  SSIM {a['ssim']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .metrics import run_ablation
    from .training import load_checkpoint

    if len(args.ckpts) != 4:
        raise UsageError(f"ablate requires exactly 4 checkpoints (model1..model4), got {len(args.ckpts)}")
    ckpts = {}
    for p in args.ckpts:
        c = load_checkpoint(p)
        v = c.config.model.variant
        if v in ckpts:
            raise UsageError(f"two checkpoints for variant {v}")
        ckpts[v] = c
    out = Path(args.out)
    write_manifest(out, args, None)
    table = run_ablation(ckpts, args.data, scale=args.scale or 4, space=args.metric_space or "y", seed=args.seed)
    table.write(out)
    for r in table.rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"model1 prior-invariant: {table.model1_prior_invariant}; ordering (indicative): {table.ordering_holds}")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argd = dict(manifest["args"])
    if args.out:
        argd["out"] = args.out
    ns = argparse.Namespace(**argd)
    ns.func = COMMANDS[manifest["subcommand"]]
    return ns.func(ns)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run config path or built-in name (baseline, small, toy)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
            sp.add_argument("--device")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="degrade a directory of HR PNGs")
    common(s)
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=int)
    s.add_argument("--kernel", choices=["isotropic", "anisotropic", "none"])
    s.add_argument("--width", type=float)
    s.add_argument("--noise", type=float)

    s = sub.add_parser("train", help="run one training stage")
    common(s)
    s.add_argument("--stage", type=int, choices=[1, 2])
    s.add_argument("--init-from", help="stage-1 checkpoint (required for stage 2)")
    s.add_argument("--resume", help="checkpoint of the same stage to continue")

    s = sub.add_parser("infer", help="super-resolve PNG file(s)")
    common(s, config=False)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.set_defaults(seed=0)

    s = sub.add_parser("eval", help="benchmark a checkpoint on a protocol grid")
    common(s, config=False)
    s.add_argument("--ckpt")
    s.add_argument("--oracle", choices=["copy-hr", "bicubic"])
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", default="isotropic_noisefree", choices=["isotropic_noisefree", "general"])
    s.add_argument("--scale", type=int)
    s.add_argument("--metric-space", choices=["y", "rgb"])
    s.set_defaults(seed=0)

    s = sub.add_parser("ablate", help="model1..model4 comparison table")
    common(s, config=False)
    s.add_argument("--ckpts", nargs="+", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scale", type=int)
    s.add_argument("--metric-space", choices=["y", "rgb"])
    s.set_defaults(seed=0)

    s = sub.add_parser("replay", help="rerun a command from its manifest.json")
    s.add_argument("manifest")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .model import MissingComponentError
    from .training import CheckpointError, TrainingError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        for part in str(e).split("; "):
            _diag("error", "config" if isinstance(e, ConfigError) else "usage", part)
        return EXIT_USAGE
    except (MissingComponentError, CheckpointError, FileNotFoundError) as e:
        _diag("error", "missing_artifact", str(e))
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, RuntimeError, OSError, ValueError) as e:
        _diag("error", "runtime", str(e), type=type(e).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
