"""Differentiable JPEG surrogate.

RGB -> YCbCr, 4:2:0 chroma averaging, 8x8 block DCT, quantization with the
IJG tables scaled by quality, a rounding surrogate, dequantization, inverse
DCT, chroma upsampling and YCbCr -> RGB.

Rounding modes:

``"ste"``
    true rounding forward, identity gradient backward (default)
``"cubic"``
    ``round(v) + (v - round(v))**3``, differentiable everywhere
``"none"``
    no rounding; the smooth map whose Jacobian the ``"ste"`` mode uses
"""

from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn.functional as F

_LUMA_TABLE = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
]

_CHROMA_TABLE = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
] + [[99] * 8] * 4

_RGB_TO_YCC = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
]
_YCC_TO_RGB = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
]

ROUNDING_MODES = ("ste", "cubic", "none")


def quality_scale(quality: int) -> int:
    """IJG percentage scaling of the base tables."""
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quant_tables(quality: int) -> tuple[torch.Tensor, torch.Tensor]:
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    scale = quality_scale(int(quality))
    out = []
    for base in (_LUMA_TABLE, _CHROMA_TABLE):
        t = torch.tensor(base, dtype=torch.float64)
        out.append(torch.clamp(torch.floor((t * scale + 50) / 100), 1, 255))
    return out[0], out[1]


@lru_cache(maxsize=None)
def _dct_matrix() -> torch.Tensor:
    """Orthonormal 8-point DCT-II basis, rows are frequencies."""
    m = torch.empty(8, 8, dtype=torch.float64)
    for u in range(8):
        c = math.sqrt(1 / 8) if u == 0 else math.sqrt(2 / 8)
        for x in range(8):
            m[u, x] = c * math.cos((2 * x + 1) * u * math.pi / 16)
    return m


def _round(v: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "ste":
        return v + (torch.round(v) - v).detach()
    if mode == "cubic":
        r = torch.round(v)
        return r + (v - r) ** 3
    return v


def _blocks(x: torch.Tensor) -> torch.Tensor:
    b, h, w = x.shape
    return x.view(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)


def _unblocks(x: torch.Tensor) -> torch.Tensor:
    b, nh, nw = x.shape[:3]
    return x.permute(0, 1, 3, 2, 4).reshape(b, nh * 8, nw * 8)


def _compress_plane(plane: torch.Tensor, table: torch.Tensor, rounding: str) -> torch.Tensor:
    d = _dct_matrix().to(plane)
    q = table.to(plane)
    blocks = _blocks(plane)
    coef = d @ blocks @ d.T
    coef = _round(coef / q, rounding) * q
    return _unblocks(d.T @ coef @ d)


def _pad_reflect(img: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    return F.pad(img, (0, pw, 0, ph), mode="reflect")


def diff_jpeg(
    img: torch.Tensor,
    quality: int,
    rounding: str = "ste",
    subsample_chroma: bool = True,
) -> torch.Tensor:
    """Differentiable JPEG approximation of a ``(B, 3, H, W)`` batch in ``[0, 1]``."""
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"rounding must be one of {ROUNDING_MODES}")
    qy, qc = quant_tables(quality)
    h, w = img.shape[-2:]
    x = _pad_reflect(img, 16 if subsample_chroma else 8) * 255.0
    b, _, hp, wp = x.shape

    ycc = torch.einsum("ij,bjhw->bihw", torch.tensor(_RGB_TO_YCC).to(x), x)
    y = ycc[:, 0] - 128.0
    cbcr = ycc[:, 1:]
    if subsample_chroma:
        cbcr = F.avg_pool2d(cbcr, 2)
    ch, cw = cbcr.shape[-2:]

    y = _compress_plane(y, qy, rounding)
    c = _compress_plane(cbcr.reshape(b * 2, ch, cw), qc, rounding).view(b, 2, ch, cw)
    if subsample_chroma:
        c = F.interpolate(c, scale_factor=2, mode="bilinear", align_corners=False)

    ycc = torch.cat([(y + 128.0).unsqueeze(1), c], dim=1)
    rgb = torch.einsum("ij,bjhw->bihw", torch.tensor(_YCC_TO_RGB).to(x), ycc) / 255.0
    return rgb[..., :h, :w].clamp(0.0, 1.0)
