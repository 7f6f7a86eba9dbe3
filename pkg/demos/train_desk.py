"""Desk-scale training run used by acceptance criteria 5 to 7.

Builds a dataset of procedurally drawn faces, ingests it through the same
path as a real face folder, trains with ``configs/desk.json`` and exports the
final model to ``checkpoints/desk.ckpt``.

    python demos/train_desk.py --work /tmp/desk

The run is resumable: rerunning the command continues from
``<work>/run/last.ckpt``.  Held-out evaluation faces use a different seed
(see tests/test_acceptance.py) and never enter training.
"""

import argparse
import logging
from pathlib import Path

import torch

from semifragile.checkpoint import load_model, save_model
from semifragile.data import FaceSet
from semifragile.imaging import save_image
from semifragile.malicious import polygon_record, write_sidecar
from semifragile.pipeline import ingest_dataset
from semifragile.synthetic import synthetic_faces
from semifragile.training import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]

parser = argparse.ArgumentParser()
parser.add_argument("--work", default="desk_work")
parser.add_argument("--faces", type=int, default=1800, help="train + validation faces")
parser.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
parser.add_argument("--export", default=str(ROOT / "checkpoints" / "desk.ckpt"))
parser.add_argument("--threads", type=int, default=None)
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
if args.threads:
    torch.set_num_threads(args.threads)

cfg = TrainConfig.load(args.config)
work = Path(args.work)
raw, data = work / "raw", work / "data"

# 1. source folder: face PNGs plus a polygon sidecar, as a landmark tool would write
if not (data / "manifest.json").exists():
    raw.mkdir(parents=True, exist_ok=True)
    imgs, polys = synthetic_faces(args.faces, cfg.arch.side, seed=1)
    records = []
    for i, (img, p) in enumerate(zip(imgs, polys)):
        save_image(img, raw / f"face_{i:05d}.png")
        records.append(polygon_record(f"face_{i:05d}.png", p))
    write_sidecar(raw / "polygons.jsonl", records)
    # the 200 test faces are drawn separately, so nothing is held out here
    ingest_dataset(raw, data, side=cfg.arch.side, seed=0, test_size=0)

# 2. train (or resume)
train_set = FaceSet.from_directory(data, "train")
val_set = FaceSet.from_directory(data, "val")
run = work / "run"
resume = run / "last.ckpt" if (run / "last.ckpt").exists() else None
state = train(cfg, train_set, run, val_set, resume=resume)

# 3. export the final model (parameters only)
bundle = load_model(run / "last.ckpt")
bundle.meta = {"step": state.step, "config": cfg.to_dict(), "train_images": len(train_set)}
save_model(bundle, args.export)
print(f"exported {args.export} at step {state.step}")
