"""Transform benchmark, ROC and copy attack for a trained checkpoint.

    python demos/evaluate_desk.py [--checkpoint checkpoints/desk.ckpt] [--out reports]

Writes ``desk_eval.json``, ``bra.png`` and ``roc.png``.  The faces come from
the held-out seed used by the acceptance suite.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from semifragile.checkpoint import load_model
from semifragile.data import FaceSet
from semifragile.evaluation import REFERENCE, bpp, perturbation_copy_attack, plot_report, transform_benchmark

ROOT = Path(__file__).resolve().parents[1]
parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default=str(ROOT / "checkpoints" / "desk.ckpt"))
parser.add_argument("--out", default=str(ROOT / "reports"))
parser.add_argument("--n", type=int, default=200)
args = parser.parse_args()

bundle = load_model(args.checkpoint)
cfg = bundle.cfg
faces = FaceSet.synthetic(args.n, cfg.side, seed=2)
print(f"model: side {cfg.side}, L {cfg.message_bits} ({bpp(cfg.message_bits, cfg.side, cfg.side, 3):.2e} bpp)")

report = transform_benchmark(bundle, faces, seed=0)
auc = report.detector(
    ["identity", "codec_jpeg_80", "codec_jpeg_50", "saturation_0.5", "contrast_0.7", "contrast_1.3"], ["tamper_w0"]
)
print(f"{'transform':<16} {'kind':<10} BRA")
for name, row in report.table().items():
    print(f"{name:<16} {row['category']:<10} {row['mean']:6.2f}")
print(f"PSNR {np.mean(report.psnr):.2f} dB  SSIM {np.mean(report.ssim):.4f}  AUC {auc:.4f}")

x, _ = faces.batch(np.arange(len(faces)))
half = len(faces) // 2
msgs = np.random.default_rng(6).integers(0, 2, size=(half, cfg.message_bits))
attack = perturbation_copy_attack(bundle, x[:half], x[half : 2 * half], msgs)
print(f"perturbation-copy attack BRA {attack:.2f}%")

out = Path(args.out)
report.notes["copy_attack_bra"] = attack
report.save(out / "desk_eval.json")
plot_report(report, out)
print("full-scale reference numbers:", json.dumps(REFERENCE))
