"""Benign training distortions and the per-batch sampling policy.

Every transform takes and returns a ``(B, 3, H, W)`` tensor in ``[0, 1]`` and
is differentiable with respect to the input.  One sampled ``TransformSpec``
is applied to a whole mini-batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .jpeg import diff_jpeg

KINDS = (
    "identity",
    "gaussian_blur",
    "jpeg",
    "saturation",
    "contrast",
    "down_up",
    "translate_rotate",
)

LUMA = (0.299, 0.587, 0.114)


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel2d(k: int, dtype=torch.float32) -> torch.Tensor:
    sigma = blur_sigma(k)
    x = torch.arange(k, dtype=torch.float64) - (k - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def gaussian_blur(img: torch.Tensor, k: int) -> torch.Tensor:
    if k not in (3, 5, 7):
        raise ValueError(f"blur kernel size must be 3, 5 or 7, got {k}")
    c = img.shape[1]
    kernel = gaussian_kernel2d(k, img.dtype).to(img.device).expand(c, 1, k, k)
    r = k // 2
    out = F.conv2d(F.pad(img, (r, r, r, r), mode="reflect"), kernel, groups=c)
    return out.clamp(0.0, 1.0)


def luminance(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def adjust_saturation(img: torch.Tensor, w: float) -> torch.Tensor:
    """``w * img + (1 - w) * gray``; ``w=1`` keeps colour, ``w=0`` is grayscale."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"saturation weight must be in [0, 1], got {w}")
    return (w * img + (1.0 - w) * luminance(img)).clamp(0.0, 1.0)


def adjust_contrast(img: torch.Tensor, factor: float) -> torch.Tensor:
    """Scale deviations from each image's mean luminance by ``factor``."""
    if factor <= 0:
        raise ValueError(f"contrast factor must be positive, got {factor}")
    mu = luminance(img).mean(dim=(1, 2, 3), keepdim=True)
    # img + (f-1)(img-mu) == mu + f(img-mu), but exact at f == 1
    return (img + (factor - 1.0) * (img - mu)).clamp(0.0, 1.0)


def down_up_sample(img: torch.Tensor, scale: float) -> torch.Tensor:
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    h, w = img.shape[-2:]
    small = (max(1, math.floor(h / scale)), max(1, math.floor(w / scale)))
    if small == (h, w):
        return img.clone()
    down = F.interpolate(img, size=small, mode="bilinear", align_corners=False)
    up = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    return up.clamp(0.0, 1.0)


def _pad_symmetric(img: torch.Tensor, top: int, bottom: int, left: int, right: int) -> torch.Tensor:
    """Mirror padding that repeats the edge pixel (matches grid_sample reflection)."""
    parts = [img]
    if top:
        parts.insert(0, img[..., :top, :].flip(-2))
    if bottom:
        parts.append(img[..., -bottom:, :].flip(-2))
    img = torch.cat(parts, dim=-2)
    parts = [img]
    if left:
        parts.insert(0, img[..., :, :left].flip(-1))
    if right:
        parts.append(img[..., :, -right:].flip(-1))
    return torch.cat(parts, dim=-1)


def _shift_integer(img: torch.Tensor, n_h: int, n_w: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    p = _pad_symmetric(img, max(n_h, 0), max(-n_h, 0), max(n_w, 0), max(-n_w, 0))
    top = max(-n_h, 0) if n_h < 0 else 0
    left = max(-n_w, 0) if n_w < 0 else 0
    return p[..., top : top + h, left : left + w]


def affine_source_coords(h: int, w: int, n_h: float, n_w: float, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) sampled by each output pixel, in pixel units.

    The output is the input shifted down by ``n_h`` and right by ``n_w`` and
    rotated by ``r`` degrees counter-clockwise about the image centre.
    """
    theta = math.radians(r)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy - n_h, xx - cx - n_w
    # inverse of a counter-clockwise rotation in image (row-down) coordinates
    cos, sin = math.cos(theta), math.sin(theta)
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    return sy, sx


def translate_rotate(img: torch.Tensor, n_h: int, n_w: int, r: float) -> torch.Tensor:
    """Shift by ``(n_h, n_w)`` pixels and rotate by ``r`` degrees; mirror-filled borders."""
    if r == 0 and float(n_h).is_integer() and float(n_w).is_integer():
        if n_h == 0 and n_w == 0:
            return img.clone()
        return _shift_integer(img, int(n_h), int(n_w))
    b, c, h, w = img.shape
    sy, sx = affine_source_coords(h, w, n_h, n_w, r)
    grid = np.stack([(2 * sx + 1) / w - 1, (2 * sy + 1) / h - 1], axis=-1)
    grid = torch.from_numpy(grid).to(img).unsqueeze(0).expand(b, h, w, 2)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.clamp(0.0, 1.0)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        return apply_benign(self, img)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(d["kind"], dict(d.get("params", {})))

    def label(self) -> str:
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"


def apply_benign(spec: TransformSpec, img: torch.Tensor, jpeg_rounding: str = "ste") -> torch.Tensor:
    p = spec.params
    if spec.kind == "identity":
        return img
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, int(p["k"]))
    if spec.kind == "jpeg":
        return diff_jpeg(img, int(p["quality"]), rounding=p.get("rounding", jpeg_rounding))
    if spec.kind == "saturation":
        return adjust_saturation(img, float(p["w"]))
    if spec.kind == "contrast":
        return adjust_contrast(img, float(p["factor"]))
    if spec.kind == "down_up":
        return down_up_sample(img, float(p["scale"]))
    return translate_rotate(img, p["n_h"], p["n_w"], float(p["r"]))


@dataclass
class BenignConfig:
    kinds: tuple[str, ...] = KINDS
    blur_kernels: tuple[int, ...] = (3, 5, 7)
    jpeg_qualities: tuple[int, ...] = (40, 60, 80)
    saturation: tuple[float, float] = (0.0, 1.0)
    contrast: tuple[float, float] = (0.5, 1.5)
    scale: tuple[float, float] = (2.0, 5.0)
    shift: int = 10
    rotation: float = 10.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BenignConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def sample_benign(rng: np.random.Generator, config: BenignConfig | None = None) -> TransformSpec:
    cfg = config or BenignConfig()
    kind = cfg.kinds[rng.integers(len(cfg.kinds))]
    if kind == "gaussian_blur":
        params = {"k": int(rng.choice(cfg.blur_kernels))}
    elif kind == "jpeg":
        params = {"quality": int(rng.choice(cfg.jpeg_qualities))}
    elif kind == "saturation":
        params = {"w": float(rng.uniform(*cfg.saturation))}
    elif kind == "contrast":
        params = {"factor": float(rng.uniform(*cfg.contrast))}
    elif kind == "down_up":
        params = {"scale": float(rng.uniform(*cfg.scale))}
    elif kind == "translate_rotate":
        params = {
            "n_h": int(rng.integers(-cfg.shift, cfg.shift + 1)),
            "n_w": int(rng.integers(-cfg.shift, cfg.shift + 1)),
            "r": float(rng.uniform(-cfg.rotation, cfg.rotation)),
        }
    else:
        params = {}
    return TransformSpec(kind, params)
