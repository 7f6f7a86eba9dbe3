"""Command-line interface.

Exit statuses: 0 success (or *authentic*), 1 *manipulated*, 2 error.
Reports are printed as JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .checkpoint import load_model
from .data import FaceSet
from .errors import CheckpointError, ConfigError, ImageFormatError
from .evaluation import EvalReport, perturbation_copy_attack, plot_report, transform_benchmark
from .imaging import load_image, save_image
from .messages import load_key
from .training import TrainConfig, train

EXIT_OK, EXIT_MANIPULATED, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("semifragile")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1))


def _message_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--message", help="message as hex (L/4 digits)")
    g.add_argument("--key", help="key file; the message is derived from the key and --context")
    p.add_argument("--context", default="", help="context string mixed into the key-derived message")


def _messages(args, L: int, n: int = 1) -> np.ndarray:
    if args.message is not None:
        msgs = [pipeline.resolve_message(L, message_hex=m) for m in args.message.split(",")]
    else:
        key = load_key(args.key)
        ctxs = args.context.split(",") if "," in args.context else [args.context]
        msgs = [pipeline.resolve_message(L, key=key, context=c) for c in ctxs]
    if len(msgs) not in (1, n):
        raise ValueError(f"{len(msgs)} messages given for {n} faces")
    return np.stack(msgs)


def cmd_ingest(args) -> int:
    m = pipeline.ingest_dataset(args.src, args.out, side=args.side, seed=args.seed, test_size=args.test_size)
    _emit({k: len(v) for k, v in m["splits"].items()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    train_set = FaceSet.from_directory(args.data, "train")
    val_set = FaceSet.from_directory(args.data, "val")
    state = train(cfg, train_set, args.out, val_set, resume=args.resume)
    _emit({"step": state.step, "out": str(args.out)})
    return EXIT_OK


def cmd_embed(args) -> int:
    bundle = load_model(args.checkpoint)
    bits = _messages(args, bundle.cfg.message_bits)[0]
    if args.boxes:
        img = load_image(args.image)
        boxes = pipeline.read_boxes(args.boxes, Path(args.image).name)
        out = pipeline.multiface_embed(bundle, img, boxes, bits)
        save_image(out, args.out, format=args.format, quality=args.quality)
        from .imaging import quality_report

        report = quality_report(img, out)
    else:
        report = pipeline.cmd_embed(bundle, args.image, bits, args.out, format=args.format, quality=args.quality)
    _emit({"out": str(args.out), **report.to_dict()})
    return EXIT_OK


def cmd_verify(args) -> int:
    bundle = load_model(args.checkpoint)
    bits = _messages(args, bundle.cfg.message_bits)[0]
    res = pipeline.verify_image(bundle, load_image(args.image), bits, args.threshold)
    _emit(res.to_dict())
    return EXIT_OK if res.authentic else EXIT_MANIPULATED


def cmd_multiface_embed(args) -> int:
    bundle = load_model(args.checkpoint)
    img = load_image(args.image)
    boxes = pipeline.read_boxes(args.boxes, Path(args.image).name)
    if not boxes:
        raise ValueError("no face boxes for this image")
    msgs = _messages(args, bundle.cfg.message_bits, len(boxes))
    out = pipeline.multiface_embed(bundle, img, boxes, msgs)
    save_image(out, args.out, format=args.format, quality=args.quality)
    _emit({"out": str(args.out), "faces": len(boxes)})
    return EXIT_OK


def cmd_multiface_verify(args) -> int:
    bundle = load_model(args.checkpoint)
    img = load_image(args.image)
    boxes = pipeline.read_boxes(args.boxes, Path(args.image).name)
    if not boxes:
        raise ValueError("no face boxes for this image")
    msgs = _messages(args, bundle.cfg.message_bits, len(boxes))
    results = pipeline.multiface_verify(bundle, img, boxes, msgs, args.threshold)
    ok = all(r.authentic for r in results)
    _emit({"authentic": ok, "faces": [r.to_dict() for r in results]})
    return EXIT_OK if ok else EXIT_MANIPULATED


def cmd_evaluate(args) -> int:
    bundle = load_model(args.checkpoint)
    test = FaceSet.from_directory(args.data, args.split)
    if args.limit:
        test = test.subset(range(min(args.limit, len(test))))
    report = transform_benchmark(bundle, test, seed=args.seed or 0)
    report.detector()
    report.save(args.out)
    if args.plots:
        plot_report(report, args.plots)
    _emit({"table": report.table(), "auc": report.auc, "psnr": float(np.mean(report.psnr)),
           "ssim": float(np.mean(report.ssim))})
    return EXIT_OK


def cmd_attack_copy(args) -> int:
    bundle = load_model(args.checkpoint)
    test = FaceSet.from_directory(args.data, args.split)
    n = min(args.pairs, len(test) // 2)
    if n < 1:
        raise ValueError("need at least two test images")
    rng = np.random.default_rng(args.seed or 0)
    order = rng.permutation(len(test))
    src, _ = test.batch(order[:n])
    tgt, _ = test.batch(order[n : 2 * n])
    msgs = rng.integers(0, 2, size=(n, bundle.cfg.message_bits))
    bra = perturbation_copy_attack(bundle, src, tgt, msgs)
    result = {"pairs": n, "attack_bra": bra}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    _emit(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semifragile", description="Semi-fragile face watermarking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="crop/resize a face folder and write a seeded split")
    s.add_argument("src")
    s.add_argument("--out", required=True)
    s.add_argument("--side", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-size", type=int, default=None)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train encoder, decoder and discriminator")
    s.add_argument("--data", required=True, help="ingested dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="training config (JSON)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    for name, fn, help_ in (
        ("embed", cmd_embed, "watermark one image"),
        ("multiface-embed", cmd_multiface_embed, "watermark every face box of an image"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("image")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--boxes", required=name == "multiface-embed", help="face boxes (JSON or sidecar)")
        s.add_argument("--format", choices=["png", "jpeg"], default=None)
        s.add_argument("--quality", type=int, default=95, help="JPEG quality when --format jpeg")
        _message_args(s)
        s.set_defaults(func=fn)

    for name, fn, help_ in (
        ("verify", cmd_verify, "check one image"),
        ("multiface-verify", cmd_multiface_verify, "check every face box of an image"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("image")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--threshold", type=float, default=pipeline.DEFAULT_THRESHOLD)
        if name == "multiface-verify":
            s.add_argument("--boxes", required=True)
        _message_args(s)
        s.set_defaults(func=fn)

    s = sub.add_parser("evaluate", help="transform benchmark and ROC on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True, help="report path (JSON)")
    s.add_argument("--plots", help="directory for ROC and BRA figures")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attack-copy", help="perturbation-copy forgery attempt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_attack_copy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, ConfigError, ImageFormatError, CheckpointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
