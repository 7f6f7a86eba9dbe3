"""Embed a key-derived message into a face, then check it before and after edits.

    python demos/embed_and_verify.py [--checkpoint checkpoints/desk.ckpt]

A benign edit (JPEG at quality 70, a contrast tweak) should keep the verdict
"authentic"; swapping the eyes, nose and mouth back to the unmarked pixels,
which is what a face-swap leaves behind, should flip it to "manipulated".
"""

import argparse
from pathlib import Path

import numpy as np

from semifragile.benign import TransformSpec, apply_benign
from semifragile.checkpoint import load_model
from semifragile.imaging import from_batch, jpeg_roundtrip, quality_report, quantize, to_batch
from semifragile.malicious import rasterize_polygons
from semifragile.messages import bits_to_hex, generate_message
from semifragile.pipeline import embed_image, verify_image
from semifragile.synthetic import synthetic_face

ROOT = Path(__file__).resolve().parents[1]
parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default=str(ROOT / "checkpoints" / "desk.ckpt"))
args = parser.parse_args()

bundle = load_model(args.checkpoint)
side, L = bundle.cfg.side, bundle.cfg.message_bits

face, polys = synthetic_face(np.random.default_rng(2024), side)
key = b"demo key, keep me secret ......"
bits = generate_message(key, b"photo-0001", L)
print(f"message for photo-0001: {bits_to_hex(bits)}")

marked = quantize(embed_image(bundle, face, bits))
q = quality_report(face, marked)
print(f"watermarked: PSNR {q.psnr:.2f} dB, SSIM {q.ssim:.4f}")


def show(label, img):
    r = verify_image(bundle, img, bits)
    print(f"{label:<22} BRA {r.bra:6.2f}%  -> {r.verdict}")


show("as saved", marked)
show("JPEG q70", jpeg_roundtrip(marked, 70))
contrast = from_batch(apply_benign(TransformSpec("contrast", {"factor": 1.2}), to_batch([marked])))[0]
show("contrast x1.2", quantize(contrast))

mask = rasterize_polygons(polys, side, side).astype(bool)
swapped = marked.copy()
swapped[mask] = face[mask]
show("features replaced", swapped)
show("never watermarked", face)
