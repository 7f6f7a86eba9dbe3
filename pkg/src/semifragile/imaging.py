"""Image I/O, centre cropping, and PSNR/SSIM.

Images at this level are ``float32`` arrays of shape ``(H, W, 3)`` in
``[0, 1]``.  ``to_batch``/``from_batch`` convert to and from the
``(B, 3, H, W)`` torch layout used by the networks and transforms.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d

from .errors import ImageFormatError

INF = math.inf

_FORMATS = {"png": "PNG", "jpeg": "JPEG", "jpg": "JPEG"}


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def to_batch(imgs) -> torch.Tensor:
    """(H, W, 3) array or list of arrays -> (B, 3, H, W) float tensor."""
    if isinstance(imgs, np.ndarray) and imgs.ndim == 3:
        imgs = [imgs]
    arr = np.stack([as_image(i) for i in imgs])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def from_batch(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)
    return list(arr)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, returned as floats in [0, 1]."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "JPEG"):
                raise ImageFormatError(f"{path}: unsupported format {fmt!r}")
            im.load()
            if im.mode in ("RGBA", "LA", "P", "PA"):
                im = im.convert("RGBA").convert("RGB")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except UnidentifiedImageError as e:
        raise OSError(f"{path}: not a readable image ({e})") from e
    except (SyntaxError, ValueError) as e:
        if isinstance(e, ImageFormatError):
            raise
        raise OSError(f"{path}: corrupt image data ({e})") from e
    return arr


def save_image(img, path: str | os.PathLike, format: str | None = None, quality: int = 95) -> None:
    """Write an 8-bit PNG or JPEG.  ``format`` defaults to the file suffix, else PNG.

    JPEG files keep full-resolution chroma (4:4:4); subsampled chroma costs
    several dB on saturated edges and erodes the embedded signal.
    """
    arr = as_image(img)
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in 1..100, got {quality!r}")
    fmt = format or Path(path).suffix.lstrip(".").lower() or "png"
    if fmt.lower() not in _FORMATS:
        raise ValueError(f"unsupported output format {fmt!r}")
    fmt = _FORMATS[fmt.lower()]
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    kwargs = {"quality": int(quality), "subsampling": 0} if fmt == "JPEG" else {}
    Image.fromarray(u8, "RGB").save(path, format=fmt, **kwargs)


def resize_bilinear(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Half-pixel-centre bilinear resampling of a ``(B, C, H, W)`` tensor."""
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)


def center_crop_resize(img, side: int) -> np.ndarray:
    arr = as_image(img)
    if side < 1:
        raise ValueError("side must be >= 1")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = arr[top : top + s, left : left + s]
    if s == side:
        return crop.copy()
    out = resize_bilinear(to_batch(crop), (side, side))
    return from_batch(out)[0]


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio with peak 1.0; ``INF`` for identical inputs."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim(a, b, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    if min(a.shape[:2]) < len(g):
        raise ValueError("images must be at least 11x11 for windowed SSIM")
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    psnr_continuous: float
    ssim_continuous: float

    def to_dict(self) -> dict:
        return {k: (None if v == INF else v) for k, v in self.__dict__.items()}


def quality_report(original, watermarked) -> QualityReport:
    """PSNR/SSIM on the 8-bit-quantized watermark (headline) and on raw floats."""
    q = quantize(as_image(watermarked))
    o = quantize(as_image(original))
    return QualityReport(
        psnr=psnr(o, q),
        ssim=ssim(o, q),
        psnr_continuous=psnr(original, watermarked),
        ssim_continuous=ssim(original, watermarked),
    )


def jpeg_roundtrip(img, quality: int, subsampling: int = -1) -> np.ndarray:
    """Encode and decode with the real (libjpeg) codec, in memory."""
    arr = as_image(img)
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    u8 = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, "RGB").save(buf, format="JPEG", quality=int(quality), subsampling=subsampling)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
