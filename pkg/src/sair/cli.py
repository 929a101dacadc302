"""Command line entry point: ``sair train | evaluate | inpaint | probe | ablate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import evaluate as ev
from .config import OUTPUT_ROOT_ENV, RunConfig, apply_overrides, load_config
from .data import BUCKETS, load_mask_file
from .errors import DatasetIOError, InvalidArgumentError, SAIRError
from .model import reconstruct
from .sample import MaskedSample
from .training import model_from_checkpoint, read_checkpoint, run_training

log = logging.getLogger("sair")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ABLATIONS = {
    "SAIR": {},
    "appearance-only": {"model.use_semantic": False},
    "NFS": {"model.use_sir": False},
    "OUS": {"model.use_appearance": False},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_args(p: argparse.ArgumentParser, required: bool = True):
    p.add_argument("--config", required=required,
                   help="config file path or bundled config name (e.g. desk_toy)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. optim.epochs=3 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--output-dir", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sair", description="Semantic-aware implicit representation for image inpainting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config")
    _config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="stop after this many epochs (schedule unchanged)")

    p = sub.add_parser("evaluate", help="bucketed PSNR/SSIM/L1/LPIPS report")
    _config_args(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--buckets", nargs="+", choices=list(BUCKETS), help="subset of mask-ratio buckets")
    p.add_argument("--figures", action="store_true", help="also write comparison grids")
    p.add_argument("--out", help="report path (default: next to the checkpoint)")

    p = sub.add_parser("inpaint", help="inpaint one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="mask image, white = missing")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0, help="output resolution factor")
    p.add_argument("--composite", action="store_true", help="paste known pixels back")
    p.add_argument("--invert-mask", action="store_true", help="treat black as missing")

    p = sub.add_parser("probe", help="zero-shot mIoU with and without SIR completion")
    _config_args(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bucket", choices=list(BUCKETS))

    p = sub.add_parser("ablate", help="train and compare SAIR, appearance-only, NFS and OUS")
    _config_args(p)
    p.add_argument("--variants", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    p.add_argument("--buckets", nargs="+", choices=list(BUCKETS))
    return parser


def resolve_config(args) -> Optional[RunConfig]:
    """File values, then ``--set`` overrides, then dedicated flags; logs the provenance of each override."""
    if getattr(args, "config", None) is None:
        return None
    config = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    config = apply_overrides(config, overrides)
    log.info("config %s (hash %s)", args.config, config.hash()[:10])
    for item in overrides:
        log.info("  cli override %s", item)
    return config


def cmd_train(args) -> int:
    config = resolve_config(args)
    final = run_training(config, resume=args.resume, max_epochs=args.epochs)
    print(final)
    return EXIT_OK


def _checkpoint(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError("checkpoint not found", path=path)
    return path


def cmd_evaluate(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    config = resolve_config(args)
    if config is None:
        _, config = model_from_checkpoint(read_checkpoint(ckpt))
    out = Path(args.out) if args.out else ckpt.parent / f"report-{config.hash()[:10]}-{ckpt.stem}.txt"
    figures = out.parent / "figures" if (args.figures or config.eval.figures) else None
    report = ev.evaluate(ckpt, config, buckets=args.buckets, figures_dir=figures)
    report.write(out)
    print(report.to_text(), end="")
    print(f"report: {out}")
    if figures is not None:
        print(f"figures: {figures}")
    return EXIT_OK


def _read_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"cannot read image ({exc})", path=path) from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def cmd_inpaint(args) -> int:
    if args.scale <= 0:
        raise InvalidArgumentError("--scale must be positive")
    model, _ = model_from_checkpoint(read_checkpoint(_checkpoint(args.checkpoint)))
    image = _read_image(args.image)
    H, W = image.shape[-2:]
    with Image.open(args.mask) as m:
        if m.size != (W, H):
            raise InvalidArgumentError(f"mask is {m.size[0]}x{m.size[1]} but image is {W}x{H}")
    mask = torch.from_numpy(load_mask_file(args.mask, H, W, invert=args.invert_mask)).float()[None]
    d = model.min_divisor
    if H % d or W % d:
        raise InvalidArgumentError(f"image {W}x{H} must be divisible by {d}")
    sample = MaskedSample(image=image, mask=mask, ground_truth=None)
    out_h, out_w = max(1, round(H * args.scale)), max(1, round(W * args.scale))
    pred = reconstruct(sample, model, out_h, out_w, composite=args.composite)
    arr = (pred.permute(1, 2, 0).numpy() * 255 + 0.5).astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(args.out)
    print(f"{args.out} ({out_w}x{out_h})")
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    model, ck_config = model_from_checkpoint(read_checkpoint(ckpt))
    config = resolve_config(args) or ck_config
    result = ev.probe(model, config, args.bucket)
    print(result.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    rows = {}
    for name in args.variants:
        config = apply_overrides(base, {"name": f"{base.name}-{name}", **ABLATIONS[name]})
        log.info("ablation %s -> %s", name, config.output_path())
        ckpt = run_training(config)
        report = ev.evaluate(ckpt, config, buckets=args.buckets)
        report.write(ckpt.parent / f"report-{config.hash()[:10]}-{ckpt.stem}.txt")
        rows[name] = report
    buckets = list(next(iter(rows.values())).buckets)
    print(f"{'variant':<16}" + "".join(f"{b:>16}" for b in buckets) + "   (PSNR / masked PSNR)")
    for name, report in rows.items():
        cells = "".join(f"{report.buckets[b].psnr:>8.2f}/{report.buckets[b].psnr_masked:<7.2f}" for b in buckets)
        print(f"{name:<16}{cells}")
    summary = {n: r.to_record() for n, r in rows.items()}
    out = base.output_path().with_name(f"{base.name}-ablation-{base.hash()[:10]}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"summary: {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "inpaint": cmd_inpaint,
            "probe": cmd_probe, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except SAIRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
