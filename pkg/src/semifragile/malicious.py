"""Simulated facial tampering.

The watermark is partially removed inside the eye, nose and lip polygons:
``g_m(x_w) = M * x_w + (1 - M) * x`` where ``M`` is one everywhere except
inside the polygons, where it equals the retention ``w_r``.

Polygon sidecars are JSON Lines, one record per image::

    {"image": "0001.png",
     "eyes": [[[x, y], ...], [[x, y], ...]],
     "nose": [[x, y], ...],
     "lips": [[x, y], ...],
     "boxes": [[x0, y0, side], ...]}

Vertices are ``[x, y]`` = (column, row) in pixel units with the pixel
``(i, j)`` covering ``[j, j+1) x [i, i+1)``.  ``boxes`` is optional and only
used by the multi-face pipeline; a record may carry boxes without polygons.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

Polygon = list[tuple[float, float]]


def _as_polygon(poly) -> np.ndarray:
    arr = np.asarray(poly, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ValueError("a polygon needs at least 3 (x, y) vertices")
    return arr


@dataclass
class FacePolygons:
    eyes: list = field(default_factory=list)
    nose: list | None = None
    lips: list | None = None

    def polygons(self) -> list[np.ndarray]:
        polys = [_as_polygon(p) for p in self.eyes]
        polys += [_as_polygon(p) for p in (self.nose, self.lips) if p is not None]
        return polys

    def validate(self, h: int, w: int) -> None:
        for p in self.polygons():
            if p[:, 0].min() < 0 or p[:, 1].min() < 0 or p[:, 0].max() > w or p[:, 1].max() > h:
                raise ValueError(f"polygon vertex outside the {h}x{w} image")

    def map(self, fn) -> "FacePolygons":
        """Apply ``fn(array_of_xy) -> array_of_xy`` to every polygon."""

        def one(p):
            return None if p is None else np.asarray(fn(_as_polygon(p))).tolist()

        return FacePolygons([one(e) for e in self.eyes], one(self.nose), one(self.lips))

    def crop_resize(self, top: float, left: float, crop: float, side: int) -> "FacePolygons":
        """Coordinates after cropping the square ``crop`` at (top, left) and resizing to ``side``."""
        s = side / crop
        return self.map(lambda p: np.clip((p - [left, top]) * s, 0, side))

    def to_dict(self) -> dict:
        return {"eyes": [np.asarray(e).tolist() for e in self.eyes],
                "nose": None if self.nose is None else np.asarray(self.nose).tolist(),
                "lips": None if self.lips is None else np.asarray(self.lips).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FacePolygons":
        return cls(list(d.get("eyes") or []), d.get("nose"), d.get("lips"))

    def is_empty(self) -> bool:
        return not self.eyes and self.nose is None and self.lips is None


def point_in_polygon_mask(poly, h: int, w: int) -> np.ndarray:
    """Even-odd test of every pixel centre against one polygon."""
    p = _as_polygon(poly)
    yc = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xc = np.arange(w, dtype=np.float64)[None, :] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > yc) != (by > yc)
        x_int = ax + (yc - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xc < x_int)
    return inside


def rasterize_polygons(polys: FacePolygons | Iterable, h: int, w: int) -> np.ndarray:
    """Binary ``(h, w)`` mask, 1 inside any polygon."""
    if isinstance(polys, FacePolygons):
        polys = polys.polygons()
    mask = np.zeros((h, w), dtype=np.uint8)
    for p in polys:
        mask |= point_in_polygon_mask(p, h, w)
    return mask


@dataclass
class RetentionMask:
    mask: np.ndarray  # (h, w, 3)
    retention: float

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.mask).permute(2, 0, 1).unsqueeze(0).float()


def build_retention_mask(
    polys: FacePolygons | Iterable, w_r: float, h: int, w: int, feather: int = 0
) -> RetentionMask:
    if not 0.0 <= w_r <= 1.0:
        raise ValueError(f"retention must be in [0, 1], got {w_r}")
    inside = rasterize_polygons(polys, h, w).astype(bool)
    if feather > 0 and inside.any():
        # linear ramp from w_r to 1 over `feather` pixels outside the polygons
        dist = distance_transform_edt(~inside)
        ramp = np.clip(dist / feather, 0.0, 1.0)
        plane = w_r + (1.0 - w_r) * ramp
    else:
        plane = np.where(inside, np.float32(w_r), np.float32(1.0))
    mask = np.repeat(plane[:, :, None], 3, axis=2).astype(np.float32)
    return RetentionMask(mask, float(w_r))


def apply_malicious(x_w: torch.Tensor, x: torch.Tensor, m) -> torch.Tensor:
    """Blend ``M * x_w + (1 - M) * x``; ``m`` is a RetentionMask or a broadcastable tensor."""
    if isinstance(m, RetentionMask):
        m = m.tensor().to(x_w)
    if x_w.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_w.shape)} vs {tuple(x.shape)}")
    if m.shape[-2:] != x.shape[-2:]:
        raise ValueError("mask and image sizes differ")
    return m * x_w + (1 - m) * x


def sample_retention(rng: np.random.Generator, lo: float = 0.0, hi: float = 0.4) -> float:
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"need 0 <= lo <= hi <= 1, got [{lo}, {hi}]")
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


class PolygonProvider(Protocol):
    def get(self, image: str) -> FacePolygons | None: ...


class SidecarPolygons:
    """Polygon provider reading a JSON Lines sidecar; records cached on first load."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._records: dict[str, dict] | None = None
        self._lock = threading.Lock()

    def records(self) -> dict[str, dict]:
        if self._records is None:
            with self._lock:
                if self._records is None:
                    self._records = read_sidecar(self.path)
        return self._records

    def get(self, image: str) -> FacePolygons | None:
        rec = self.records().get(Path(image).name)
        if rec is None:
            return None
        polys = FacePolygons.from_dict(rec)
        return None if polys.is_empty() else polys

    def boxes(self, image: str) -> list[tuple[int, int, int]]:
        rec = self.records().get(Path(image).name) or {}
        return [tuple(int(v) for v in b) for b in rec.get("boxes", [])]


def read_sidecar(path: str | os.PathLike) -> dict[str, dict]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "image" not in rec:
                raise ValueError(f"{path}:{n}: record without an 'image' field")
            out[Path(rec["image"]).name] = rec
    return out


def write_sidecar(path: str | os.PathLike, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def polygon_record(image: str, polys: FacePolygons | None = None, boxes=None) -> dict:
    rec: dict = {"image": image}
    if polys is not None:
        rec.update(polys.to_dict())
    if boxes is not None:
        rec["boxes"] = [list(map(int, b)) for b in boxes]
    return rec
