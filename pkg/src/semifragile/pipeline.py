"""Dataset ingestion, single-image embed/verify and the multi-face path.

Verification compares the hardened decoder output with the expected
message; the verdict is *authentic* iff the bit recovery accuracy is at
least the threshold (85% by default).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .data import MANIFEST, SIDECAR
from .evaluation import bit_recovery_accuracy
from .imaging import (
    QualityReport,
    as_image,
    center_crop_resize,
    from_batch,
    load_image,
    quality_report,
    resize_bilinear,
    save_image,
    to_batch,
)
from .malicious import SidecarPolygons, polygon_record, write_sidecar
from .messages import as_bits, bits_to_hex, generate_message, harden, hex_to_bits
from .networks import ModelBundle

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 85.0
MIN_BOX = 32
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


# -- ingestion --------------------------------------------------------------

def split_sizes(n: int, test_size: int | None = None) -> tuple[int, int, int]:
    """``(test, train, val)``: up to 1000 test images, the rest split 80/20."""
    if n < 1:
        raise ValueError("no images")
    test = min(1000, n // 5) if test_size is None else int(test_size)
    if not 0 <= test < n:
        raise ValueError(f"test_size={test} must leave at least one image of {n} for training")
    rest = n - test
    train = int(round(0.8 * rest))
    return test, train, rest - train


def ingest_dataset(
    src_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    side: int = 256,
    seed: int = 0,
    test_size: int | None = None,
) -> dict:
    """Centre-crop and resize every image in ``src_dir`` and write a seeded split.

    A ``polygons.jsonl`` sidecar in ``src_dir`` (original pixel coordinates)
    is carried over into ``out_dir`` with the polygons mapped through the
    same crop and resize.
    """
    src, out = Path(src_dir), Path(out_dir)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no PNG/JPEG images in {src}")
    n_test, n_train, n_val = split_sizes(len(files), test_size)
    provider = SidecarPolygons(src / SIDECAR) if (src / SIDECAR).exists() else None
    (out / "images").mkdir(parents=True, exist_ok=True)
    names, records = [], []
    for p in files:
        img = load_image(p)
        h, w = img.shape[:2]
        s = min(h, w)
        top, left = (h - s) // 2, (w - s) // 2
        name = p.stem + ".png"
        if name in names:
            raise ValueError(f"two inputs map to {name}")
        save_image(center_crop_resize(img, side), out / "images" / name)
        names.append(name)
        polys = provider.get(p.name) if provider else None
        if polys is not None:
            records.append(polygon_record(name, polys.crop_resize(top, left, s, side)))
    order = np.random.default_rng(seed).permutation(len(names))
    shuffled = [names[i] for i in order]
    splits = {
        "test": sorted(shuffled[:n_test]),
        "train": sorted(shuffled[n_test : n_test + n_train]),
        "val": sorted(shuffled[n_test + n_train :]),
    }
    manifest = {
        "side": side,
        "seed": seed,
        "files": {f: k for k, v in splits.items() for f in v},
        "splits": splits,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    if records:
        write_sidecar(out / SIDECAR, records)
    log.info("ingested %d images: %d train, %d val, %d test", len(names), n_train, n_val, n_test)
    return manifest


# -- messages ---------------------------------------------------------------

def resolve_message(L: int, message_hex: str | None = None, key: bytes | None = None, context: str = "") -> np.ndarray:
    """Bits from an explicit hex string, or derived from ``key`` and ``context``."""
    if (message_hex is None) == (key is None):
        raise ValueError("give exactly one of a hex message or a key")
    if message_hex is not None:
        return hex_to_bits(message_hex, L)
    return generate_message(key, context.encode(), L)


# -- single image -----------------------------------------------------------

@dataclass(frozen=True)
class VerifyResult:
    message_hex: str
    bra: float
    authentic: bool
    threshold: float

    @property
    def verdict(self) -> str:
        return "authentic" if self.authentic else "manipulated"

    def to_dict(self) -> dict:
        return {**asdict(self), "verdict": self.verdict}


def verdict(decoded: np.ndarray, expected: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> VerifyResult:
    """Pure decision rule from decoded soft bits and the expected message."""
    if not 0 <= threshold <= 100:
        raise ValueError(f"threshold must be a percentage, got {threshold}")
    bra = bit_recovery_accuracy(expected, decoded)
    bits = harden(decoded)
    hex_ = bits_to_hex(bits) if bits.size % 4 == 0 else "".join(map(str, bits))
    return VerifyResult(hex_, bra, bra >= threshold, float(threshold))


def _check_side(bundle: ModelBundle, img: np.ndarray) -> None:
    s = bundle.cfg.side
    if img.shape[:2] != (s, s):
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]} but the model expects {s}x{s}; pass face boxes")


@torch.no_grad()
def embed_image(bundle: ModelBundle, img, bits) -> np.ndarray:
    img = as_image(img)
    _check_side(bundle, img)
    bits = as_bits(bits)
    if bits.size != bundle.cfg.message_bits:
        raise ValueError(f"message length {bits.size} != L={bundle.cfg.message_bits}")
    bundle.eval()
    x_w = bundle.encoder(to_batch([img]), torch.from_numpy(bits[None].astype(np.float32)))
    return from_batch(x_w)[0]


@torch.no_grad()
def decode_image(bundle: ModelBundle, img) -> np.ndarray:
    img = as_image(img)
    _check_side(bundle, img)
    bundle.eval()
    return bundle.decoder(to_batch([img]))[0][0].numpy()


def verify_image(bundle: ModelBundle, img, expected, threshold: float = DEFAULT_THRESHOLD) -> VerifyResult:
    expected = as_bits(expected)
    if expected.size != bundle.cfg.message_bits:
        raise ValueError(f"message length {expected.size} != L={bundle.cfg.message_bits}")
    return verdict(decode_image(bundle, img), expected, threshold)


def cmd_embed(
    bundle: ModelBundle, image_path, bits, out_path, format: str | None = None, quality: int = 95
) -> QualityReport:
    bits = as_bits(bits)
    if bits.size != bundle.cfg.message_bits:
        raise ValueError(f"message length {bits.size} != L={bundle.cfg.message_bits}")
    img = load_image(image_path)
    x_w = embed_image(bundle, img, bits)
    save_image(x_w, out_path, format=format, quality=quality)
    return quality_report(img, x_w)


# -- multiple faces ---------------------------------------------------------

@dataclass(frozen=True)
class FaceBox:
    x0: int
    y0: int
    side: int
    source: str = "sidecar"

    def validate(self, h: int, w: int) -> None:
        if self.side < MIN_BOX:
            raise ValueError(f"face box side {self.side} < {MIN_BOX}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.side > w or self.y0 + self.side > h:
            raise ValueError(f"face box {self.x0, self.y0, self.side} outside the {w}x{h} image")

    def shifted(self, dx: int, dy: int) -> "FaceBox":
        return FaceBox(self.x0 + dx, self.y0 + dy, self.side, self.source)


class FaceDetector(Protocol):
    """Adapter for an external face detector."""

    def detect(self, img: np.ndarray) -> list[FaceBox]: ...


def as_boxes(boxes) -> list[FaceBox]:
    return [b if isinstance(b, FaceBox) else FaceBox(*map(int, b)) for b in boxes]


def read_boxes(path: str | os.PathLike, image: str | None = None) -> list[FaceBox]:
    """Boxes from a JSON list ``[[x0, y0, side], ...]`` or a JSON Lines sidecar record."""
    path = Path(path)
    text = path.read_text().strip()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, list):
        return as_boxes(data)
    if isinstance(data, dict):
        return as_boxes(data.get("boxes", []))
    if image is None:
        raise ValueError(f"{path} holds several records; the image name selects one")
    return as_boxes(SidecarPolygons(path).boxes(image))


def _messages_for(boxes, messages, L: int) -> list[np.ndarray]:
    msgs = [as_bits(m) for m in (messages if np.ndim(messages) == 2 else [messages])]
    if len(msgs) == 1:
        msgs = msgs * len(boxes)
    if len(msgs) != len(boxes):
        raise ValueError(f"{len(boxes)} faces but {len(msgs)} messages")
    if any(m.size != L for m in msgs):
        raise ValueError(f"every message must have L={L} bits")
    return msgs


def _crop(img: np.ndarray, box: FaceBox, side: int) -> torch.Tensor:
    crop = img[box.y0 : box.y0 + box.side, box.x0 : box.x0 + box.side]
    return resize_bilinear(to_batch([crop]), (side, side))


def multiface_embed(bundle: ModelBundle, img, boxes: Sequence, messages) -> np.ndarray:
    """Embed into each box independently; boxes are processed in order, later ones win overlaps."""
    img = as_image(img)
    boxes = as_boxes(boxes)
    if not boxes:
        raise ValueError("no face boxes")
    h, w = img.shape[:2]
    for b in boxes:
        b.validate(h, w)
    msgs = _messages_for(boxes, messages, bundle.cfg.message_bits)
    out = img.copy()
    bundle.eval()
    with torch.no_grad():
        for b, m in zip(boxes, msgs):
            x = _crop(img, b, bundle.cfg.side)
            x_w = bundle.encoder(x, torch.from_numpy(m[None].astype(np.float32)))
            back = from_batch(resize_bilinear(x_w, (b.side, b.side)))[0]
            out[b.y0 : b.y0 + b.side, b.x0 : b.x0 + b.side] = back
    return out


def multiface_verify(
    bundle: ModelBundle, img, boxes: Sequence, messages, threshold: float = DEFAULT_THRESHOLD
) -> list[VerifyResult]:
    img = as_image(img)
    boxes = as_boxes(boxes)
    if not boxes:
        raise ValueError("no face boxes")
    h, w = img.shape[:2]
    for b in boxes:
        b.validate(h, w)
    msgs = _messages_for(boxes, messages, bundle.cfg.message_bits)
    bundle.eval()
    results = []
    with torch.no_grad():
        for b, m in zip(boxes, msgs):
            probs = bundle.decoder(_crop(img, b, bundle.cfg.side))[0][0].numpy()
            results.append(verdict(probs, m, threshold))
    return results
