"""Command-line entry point: ``hadeblur <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .config import TrainConfig, load_config
from .errors import CheckpointError, ConfigError, DataError
from .network import NetworkConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sorted_pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"missing directory {directory}")
    return sorted(directory.glob("*.png"))


def _configs(args) -> tuple[TrainConfig, NetworkConfig]:
    if args.config:
        train_cfg, net_cfg = load_config(args.config)
    else:
        train_cfg, net_cfg = TrainConfig(), NetworkConfig()
    if args.seed is not None:
        train_cfg.seed = args.seed
    return train_cfg, net_cfg


# --- subcommands ----------------------------------------------------------


def cmd_synth(args) -> None:
    frames = _sorted_pngs(Path(args.frames))
    window = args.window
    if window < 3 or window % 2 == 0:
        raise UsageError(f"--window must be odd and >= 3, got {window}")
    if args.start + window > len(frames):
        raise DataError(f"{args.frames}: need {args.start + window} frames, found {len(frames)}")
    out = Path(args.out)
    starts = range(args.start, len(frames) - window + 1, args.stride) if args.stride else [args.start]
    for i, start in enumerate(starts):
        imgs = [data.read_image(p) for p in frames[start : start + window]]
        if any(im.shape != imgs[0].shape for im in imgs):
            raise DataError(f"{args.frames}: frames differ in size")
        blurred, sharp = data.synthesize_blur(imgs)
        target = out if not args.stride else out / f"{i:06d}"
        data.write_image(target / "blur.png", blurred)
        data.write_image(target / "sharp.png", sharp)


def cmd_rasterize(args) -> None:
    if not Path(args.annotations).is_dir():
        raise DataError(f"missing directory {args.annotations}")
    ann_files = sorted(Path(args.annotations).glob("*.json"))
    for path in ann_files:
        name, width, height, boxes = data.read_annotation(path)
        mask = data.rasterize_mask(boxes, width, height)
        data.write_image(Path(args.out) / f"{Path(name).stem}.png", mask.astype(np.float32))


def _load_train_samples(roots: list[str]) -> list[data.AnnotatedSample]:
    samples = []
    for root in roots:
        samples.extend(data.load_dataset(root, "train"))
    return samples


def cmd_pretrain_attention(args) -> None:
    from .trainer import pretrain_attention, save_attention

    train_cfg, net_cfg = _configs(args)
    if args.iters is not None:
        train_cfg.pretrain_iters = args.iters
    samples = [s for s in _load_train_samples(args.data) if s.boxes]
    if not samples:
        raise DataError("no annotated samples to pretrain attention on")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pretrain.log", "w") as log_file:
        attention = pretrain_attention(samples, train_cfg, widths=net_cfg.attention_widths,
                                       out_dir=out, log_file=log_file)
    save_attention(out / "attention.ckpt", attention, train_cfg.pretrain_iters)


def cmd_train(args) -> None:
    from .trainer import train

    train_cfg, net_cfg = _configs(args)
    if args.max_steps is not None:
        train_cfg.max_steps = args.max_steps
    samples = _load_train_samples(args.data)
    val = data.load_dataset(args.val, "test") if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with open(out / "train.log", mode) as log_file:
        result = train(
            samples, train_cfg, net_cfg,
            attention=args.attention, from_scratch=args.from_scratch, resume=args.resume,
            out_dir=out, val_samples=val, log_file=log_file,
        )
    for path in result.checkpoints:
        print(path)


def _predictions_from_dir(directory: Path, samples) -> dict[str, np.ndarray]:
    preds = {}
    for s in samples:
        path = directory / f"{s.source_id}.png"
        if not path.is_file():
            raise DataError(f"missing prediction {path}")
        preds[s.source_id] = data.read_image(path)
    return preds


def cmd_eval(args) -> None:
    from .checkpoint import load_model
    from .trainer import evaluate

    samples = data.load_dataset(args.data, args.split)
    if args.ckpt:
        model, _ = load_model(args.ckpt)
        evaluate(samples, model=model, report=args.out, luma=not args.per_channel)
    else:
        preds = _predictions_from_dir(Path(args.predictions), samples)
        evaluate(samples, predictions=preds, report=args.out, luma=not args.per_channel)


def cmd_infer(args) -> None:
    from .checkpoint import load_model
    from .trainer import predict

    model, _ = load_model(args.ckpt)
    blurred = data.read_image(args.input)
    sharp, attn = predict(model, blurred)
    data.write_image(args.output, sharp)
    if args.save_attention is not None:
        if attn is None:
            raise CheckpointError(f"{args.ckpt}: model has no attention module")
        out = Path(args.output)
        target = args.save_attention or out.with_name(f"{out.stem}_attention.png")
        data.write_image(target, attn)


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hadeblur", description="Human-aware multi-scale motion deblurring.")
    parser.add_argument("--seed", type=int, default=None, help="override the configured random seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="strict-deterministic kernels (reproducible bytes)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="average a frame window into a blurred/sharp pair")
    p.add_argument("--frames", required=True, help="directory of sequential PNG frames")
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--start", type=int, default=0, help="index of the first frame used")
    p.add_argument("--stride", type=int, default=0,
                   help="if set, emit one pair per window start, every STRIDE frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rasterize", help="turn box annotations into mask PNGs")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("pretrain-attention", help="pretrain the attention subnetwork")
    p.add_argument("--data", required=True, action="append", help="dataset root (repeatable)")
    p.add_argument("--config")
    p.add_argument("--iters", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_attention)

    p = sub.add_parser("train", help="train the deblurring network")
    p.add_argument("--data", required=True, action="append", help="dataset root (repeatable)")
    p.add_argument("--config")
    p.add_argument("--val", help="dataset root whose test split is used for validation snapshots")
    start = p.add_mutually_exclusive_group()
    start.add_argument("--attention", help="pretrained attention checkpoint")
    start.add_argument("--from-scratch", action="store_true", help="train attention jointly from scratch")
    start.add_argument("--resume", help="model checkpoint to continue from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write a PSNR/SSIM CSV report")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--predictions", help="directory of <id>.png predictions to score instead")
    p.add_argument("--per-channel", action="store_true", help="SSIM averaged over RGB instead of luma")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="deblur a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--save-attention", nargs="?", const="", default=None, metavar="PATH",
                   help="also write the attention map (default: <output>_attention.png)")
    p.set_defaults(func=cmd_infer)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        from .trainer import set_deterministic

        set_deterministic(args.seed if args.seed is not None else 0)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hadeblur {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"hadeblur {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"hadeblur {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
