"""In-memory face image sets with their feature-polygon masks."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .imaging import load_image
from .malicious import FacePolygons, SidecarPolygons, rasterize_polygons
from .synthetic import synthetic_faces

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SIDECAR = "polygons.jsonl"


@dataclass
class FaceSet:
    """Images stored as uint8 ``(N, H, W, 3)``; ``masks`` is 1 inside facial polygons."""

    images: np.ndarray
    masks: np.ndarray | None = None
    names: list[str] = field(default_factory=list)
    polygons: list[FacePolygons | None] = field(default_factory=list)

    def __post_init__(self):
        if self.images.dtype != np.uint8:
            self.images = np.round(np.clip(self.images, 0, 1) * 255).astype(np.uint8)
        if not self.names:
            self.names = [f"{i:06d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def has_polygons(self, idx) -> np.ndarray:
        if self.masks is None:
            return np.zeros(len(np.atleast_1d(idx)), dtype=bool)
        return self.masks[idx].reshape(len(np.atleast_1d(idx)), -1).any(axis=1)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor | None]:
        """``(x, mask)``: float images ``(B, 3, H, W)`` and polygon masks ``(B, 1, H, W)``."""
        idx = np.atleast_1d(idx)
        x = torch.from_numpy(self.images[idx].astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
        m = None
        if self.masks is not None:
            m = torch.from_numpy(self.masks[idx].astype(np.float32)).unsqueeze(1)
        return x, m

    def subset(self, idx) -> "FaceSet":
        idx = list(np.atleast_1d(idx))
        return FaceSet(
            self.images[idx],
            None if self.masks is None else self.masks[idx],
            [self.names[i] for i in idx],
            [self.polygons[i] for i in idx] if self.polygons else [],
        )

    @classmethod
    def from_polygons(cls, images: np.ndarray, polygons, names=None) -> "FaceSet":
        h, w = images.shape[1:3]
        masks = np.stack(
            [rasterize_polygons(p, h, w) if p is not None else np.zeros((h, w), np.uint8) for p in polygons]
        )
        return cls(images, masks, list(names or []), list(polygons))

    @classmethod
    def synthetic(cls, n: int, side: int = 128, seed: int = 0) -> "FaceSet":
        imgs, polys = synthetic_faces(n, side, seed)
        return cls.from_polygons(imgs, polys, [f"synth_{seed}_{i:06d}.png" for i in range(n)])

    @classmethod
    def from_directory(cls, root: str | os.PathLike, split: str | None = None) -> "FaceSet":
        """Load an ingested dataset (see ``pipeline.ingest_dataset``)."""
        root = Path(root)
        manifest = json.loads((root / MANIFEST).read_text())
        names = manifest["splits"][split] if split else sorted(manifest["files"])
        sidecar = root / SIDECAR
        provider = SidecarPolygons(sidecar) if sidecar.exists() else None
        imgs, polys = [], []
        for name in names:
            imgs.append(load_image(root / "images" / name))
            polys.append(provider.get(name) if provider else None)
        if not imgs:
            return cls(np.zeros((0, manifest["side"], manifest["side"], 3), np.uint8))
        return cls.from_polygons(np.stack(imgs), polys, names)
