"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .degrade import DEGRADE_MODES, DataError, degrade_bi, degrade_path, extract_patches, list_images, load_png, save_png
from .gradcheck import TOLERANCE, suite
from .metrics import evaluate_pair, results_csv
from .network import AlreadyFusedWarning, ConfigError, ModelConfig, build_model, fuse_model, super_resolve
from .profile import DYNAMIC_COSTS, MODES, cost_report
from .tensor import DimensionError
from .train import TrainingError, trace_csv, train_toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path) -> ModelConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return ModelConfig.from_dict(raw)
    except TypeError as exc:
        raise UsageError(f"config {path}: {exc}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return w, h


def describe(model) -> str:
    lines = [f"{type(model).__name__}  {model.cfg.to_dict()}"]
    for name, m in model.named_modules():
        if not name:
            continue
        depth = name.count(".")
        own = sum(p.data.size for p in m._params.values())
        extra = ""
        if hasattr(m, "weight") and m._params.get("weight") is not None and m.weight.ndim == 4:
            o, i, k, _ = m.weight.shape
            extra = f"  {i * m.groups}->{o} k={k} stride={m.stride} groups={m.groups}"
        elif hasattr(m, "style"):
            extra = f"  {m.c_in}->{m.c_out} k={m.k} style={'fused' if m.is_fused else m.style}"
        elif getattr(m, "latent", 0):
            extra = f"  latent={m.latent}"
        tail = f"  params={own}" if own else ""
        lines.append(f"{'  ' * depth}{name.rsplit('.', 1)[-1]}: {type(m).__name__}{extra}{tail}")
    return "\n".join(lines)


def cmd_describe(args) -> int:
    print(describe(build_model(load_config(args.config))))
    return EXIT_OK


def cmd_count(args) -> int:
    model = build_model(load_config(args.config))
    w, h = args.out_size
    report = cost_report(model, h, w, args.mode, args.dynamic_cost)
    print(report.to_csv() if args.format == "csv" else report.to_text(), end="" if args.format == "csv" else "\n")
    return EXIT_OK


def cmd_degrade(args) -> int:
    written = degrade_path(args.input, args.output, args.mode, args.scale, args.seed)
    print(f"wrote {len(written)} image(s)", file=sys.stderr)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt)
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        pairs = [(p, dst / p.relative_to(src)) for p in list_images(src)]
    elif src.is_file():
        pairs = [(src, dst)]
    else:
        raise DataError(f"no such file or directory: {src}")
    for p, q in pairs:
        sr = super_resolve(model, load_png(p))
        if not np.all(np.isfinite(sr)):
            raise NumericalFailure(f"non-finite output for {p}")
        save_png(q, sr)
    print(f"super-resolved {len(pairs)} image(s) (fused={model.fused})", file=sys.stderr)
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = ckpt.load_checkpoint(args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AlreadyFusedWarning)
        fused = fuse_model(model)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    ckpt.save_checkpoint(fused, args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    hr_dir, sr_dir = Path(args.hr), Path(args.sr)
    for d in (hr_dir, sr_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    rows = []
    for p in list_images(hr_dir):
        rel = p.relative_to(hr_dir)
        q = sr_dir / rel
        if not q.is_file():
            raise DataError(f"missing SR image for {rel}")
        hr, sr = load_png(p), load_png(q)
        if hr.shape != sr.shape:
            raise DataError(f"{rel}: HR {hr.shape[2:]} and SR {sr.shape[2:]} differ in size")
        rows.append((rel.as_posix(), *evaluate_pair(hr, sr, args.shave)))
    if not rows:
        raise DataError(f"no PNG images under {hr_dir}")
    print(results_csv(rows), end="")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_config(args.config)
    images = list_images(args.data)
    if not images:
        raise DataError(f"no PNG images under {args.data}")
    pairs = []
    for i, p in enumerate(images):
        hr = load_png(p)
        hr = hr[:, :, : hr.shape[2] - hr.shape[2] % cfg.scale, : hr.shape[3] - hr.shape[3] % cfg.scale]
        pairs += extract_patches(hr, degrade_bi(hr, cfg.scale), args.patch_size, args.patches,
                                 seed=args.seed + i, augment=False)
    model = build_model(cfg, seed=args.seed)
    model, trace = train_toy(model, pairs, args.steps, seed=args.seed, finetune_steps=args.finetune_steps,
                             lr_max=args.lr, augment=args.augment, batch_size=args.batch_size)
    text = trace_csv(trace)
    if args.trace:
        Path(args.trace).write_text(text)
    else:
        print(text, end="")
    ckpt.save_checkpoint(model, args.out)
    if trace:
        print(f"final loss {trace[-1].loss:.6f} after {len(trace)} steps", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = suite(seed=args.seed, channels=args.channels, size=args.size, max_checks=args.max_checks)
    worst = 0.0
    for name, err in results:
        print(f"{name:<18} {err:.3e}  {'ok' if err <= TOLERANCE else 'FAIL'}")
        worst = max(worst, err)
    print(f"worst relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst > TOLERANCE:
        raise NumericalFailure(f"gradient check exceeded tolerance: {worst:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repdistill", description="Lightweight super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("describe", help="print the layer-by-layer architecture")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_describe)

    s = sub.add_parser("count", help="parameter and multiply-accumulate table")
    s.add_argument("--config", required=True)
    s.add_argument("--out-size", type=_size, default=(1280, 720), help="output resolution WxH")
    s.add_argument("--mode", choices=MODES, default="inference")
    s.add_argument("--dynamic-cost", choices=DYNAMIC_COSTS, default="dense")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.set_defaults(fn=cmd_count)

    s = sub.add_parser("degrade", help="make LR images from HR images")
    s.add_argument("--mode", choices=DEGRADE_MODES, required=True)
    s.add_argument("--scale", type=int, choices=(2, 3, 4), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("infer", help="super-resolve an image or a directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("fuse", help="collapse training branches into single convolutions")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.set_defaults(fn=cmd_fuse)

    s = sub.add_parser("eval", help="PSNR/SSIM of SR images against HR references, as CSV")
    s.add_argument("--hr", required=True)
    s.add_argument("--sr", required=True)
    s.add_argument("--shave", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("train-toy", help="small deterministic training run")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="directory of HR PNG images")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--trace", help="write the loss trace CSV here instead of standard output")
    s.add_argument("--finetune-steps", type=int, default=0, help="L2 steps after fusing")
    s.add_argument("--patch-size", type=int, default=32, help="LR patch size")
    s.add_argument("--patches", type=int, default=4, help="patches per image")
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--augment", action="store_true")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--max-checks", type=int, default=6)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def _validate(args) -> None:
    for flag in ("steps", "finetune_steps", "patches", "shave"):
        if getattr(args, flag, 0) is not None and getattr(args, flag, 0) < 0:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 0")
    for flag in ("patch_size", "batch_size"):
        if getattr(args, flag, 1) < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 1")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt.CheckpointError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
