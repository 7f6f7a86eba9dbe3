"""Procedural face images with exact landmark polygons.

Used as a stand-in face corpus where no real dataset or landmark detector
is available.  Each face comes with eye, nose and lip polygons in pixel
coordinates, so the malicious transform can be applied without a detector.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter, zoom

from .malicious import FacePolygons

SKIN_TONES = np.array(
    [
        [255, 224, 196],
        [241, 194, 160],
        [224, 172, 125],
        [198, 134, 94],
        [161, 102, 68],
        [113, 72, 45],
        [88, 55, 35],
    ],
    dtype=np.float64,
)
HAIR_TONES = np.array(
    [[20, 15, 10], [60, 40, 25], [110, 75, 40], [170, 130, 80], [210, 190, 140], [90, 90, 90]],
    dtype=np.float64,
)
IRIS_TONES = np.array([[60, 40, 20], [40, 80, 140], [60, 110, 60], [110, 80, 40]], dtype=np.float64)

_SS = 4  # supersampling factor


def _ellipse(cx, cy, rx, ry, n=12, start=0.0):
    t = start + np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _rotate(pts, cx, cy, deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    d = pts - [cx, cy]
    return np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1) + [cx, cy]


def _smooth_noise(rng, side, scale, amp):
    n = rng.normal(size=(side, side))
    return gaussian_filter(n, scale) * amp / max(1e-8, gaussian_filter(n, scale).std())


def _col(rgb):
    return tuple(int(np.clip(v, 0, 255)) for v in rgb)


def _background(rng, side):
    c0, c1 = rng.uniform(20, 235, size=(2, 3))
    t = np.linspace(0, 1, side)
    ang = rng.uniform(0, 2 * np.pi)
    g = np.cos(ang) * t[None, :] + np.sin(ang) * t[:, None]
    g = (g - g.min()) / max(1e-8, np.ptp(g))
    bg = c0 * (1 - g[..., None]) + c1 * g[..., None]
    bg += _smooth_noise(rng, side, side / 16, 12)[..., None]
    img = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8)).resize((side * _SS,) * 2)
    draw = ImageDraw.Draw(img)
    for _ in range(rng.integers(2, 7)):
        x0, y0 = rng.uniform(-0.2, 1.0, 2) * side * _SS
        w, h = rng.uniform(0.1, 0.5, 2) * side * _SS
        color = _col(rng.uniform(0, 255, 3))
        if rng.random() < 0.5:
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=color)
        else:
            draw.rectangle([x0, y0, x0 + w, y0 + h], fill=color)
    return img


def synthetic_face(rng: np.random.Generator, side: int = 128) -> tuple[np.ndarray, FacePolygons]:
    """One ``(side, side, 3)`` face image in [0, 1] and its feature polygons."""
    S = side * _SS
    img = _background(rng, side)
    draw = ImageDraw.Draw(img)

    cx = S * (0.5 + rng.uniform(-0.05, 0.05))
    cy = S * (0.53 + rng.uniform(-0.04, 0.04))
    rx = S * rng.uniform(0.25, 0.32)
    ry = rx * rng.uniform(1.2, 1.35)
    tilt = rng.uniform(-10, 10)
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))] + rng.uniform(-12, 12, 3)
    hair = HAIR_TONES[rng.integers(len(HAIR_TONES))]

    def poly(pts, **kw):
        draw.polygon([tuple(p) for p in _rotate(np.asarray(pts), cx, cy, tilt)], **kw)

    # shoulders, neck, hair, head
    shirt = _col(rng.uniform(0, 255, 3))
    poly(_ellipse(cx, cy + ry * 1.75, rx * 1.9, ry * 0.8, 32), fill=shirt)
    poly([[cx - rx * 0.38, cy + ry * 0.5], [cx + rx * 0.38, cy + ry * 0.5],
          [cx + rx * 0.42, cy + ry * 1.2], [cx - rx * 0.42, cy + ry * 1.2]], fill=_col(skin * 0.85))
    poly(_ellipse(cx, cy - ry * 0.12, rx * 1.12, ry * 1.0, 40), fill=_col(hair))
    poly(_ellipse(cx, cy, rx, ry, 48), fill=_col(skin))
    if rng.random() < 0.7:
        poly(_ellipse(cx, cy - ry * 0.78, rx * 0.95, ry * 0.32, 32), fill=_col(hair))

    # eyes
    eye_dx = rx * rng.uniform(0.36, 0.44)
    eye_y = cy - ry * rng.uniform(0.08, 0.16)
    eye_rx = rx * rng.uniform(0.17, 0.21)
    eye_ry = eye_rx * rng.uniform(0.45, 0.6)
    iris = IRIS_TONES[rng.integers(len(IRIS_TONES))]
    eyes = []
    for sgn in (-1, 1):
        ex = cx + sgn * eye_dx
        outline = _ellipse(ex, eye_y, eye_rx, eye_ry, 10)
        socket = _ellipse(ex, eye_y, eye_rx * 1.25, eye_ry * 1.6, 12)
        eyes.append(socket)
        poly(socket, fill=_col(skin * 0.88))
        poly(outline, fill=(240, 238, 232))
        poly(_ellipse(ex + rng.uniform(-0.2, 0.2) * eye_rx, eye_y, eye_ry * 0.95, eye_ry * 0.95, 16),
             fill=_col(iris))
        poly(_ellipse(ex, eye_y, eye_ry * 0.4, eye_ry * 0.4, 12), fill=(10, 10, 10))
        brow_y = eye_y - eye_ry * rng.uniform(1.9, 2.4)
        poly([[ex - eye_rx * 1.1, brow_y + eye_ry * 0.3], [ex, brow_y - eye_ry * 0.2],
              [ex + eye_rx * 1.1, brow_y + eye_ry * 0.3], [ex, brow_y + eye_ry * 0.3]],
             fill=_col(hair * 0.8))

    # nose
    top = eye_y + eye_ry * 0.5
    base = cy + ry * rng.uniform(0.22, 0.3)
    half = rx * rng.uniform(0.14, 0.19)
    nose = np.array([
        [cx - half * 0.35, top], [cx + half * 0.35, top],
        [cx + half * 0.6, base - half * 0.8], [cx + half, base],
        [cx, base + half * 0.3], [cx - half, base],
        [cx - half * 0.6, base - half * 0.8],
    ])
    poly(nose, fill=_col(skin * 0.9))
    for sgn in (-1, 1):
        poly(_ellipse(cx + sgn * half * 0.45, base - half * 0.05, half * 0.22, half * 0.14, 8),
             fill=_col(skin * 0.45))

    # lips
    my = cy + ry * rng.uniform(0.48, 0.56)
    mw = rx * rng.uniform(0.28, 0.36)
    mh = mw * rng.uniform(0.25, 0.4)
    lips = np.array([
        [cx - mw, my], [cx - mw * 0.5, my - mh * 0.8], [cx, my - mh * 0.55],
        [cx + mw * 0.5, my - mh * 0.8], [cx + mw, my], [cx + mw * 0.5, my + mh],
        [cx, my + mh * 1.15], [cx - mw * 0.5, my + mh],
    ])
    lip_col = skin * np.array([0.85, 0.45, 0.45]) + np.array([40, 0, 0])
    poly(lips, fill=_col(lip_col))
    poly([[cx - mw, my], [cx, my + mh * 0.12], [cx + mw, my], [cx, my - mh * 0.05]], fill=_col(lip_col * 0.5))

    arr = np.asarray(img, dtype=np.float64).reshape(side, _SS, side, _SS, 3).mean(axis=(1, 3))
    # shading and skin/sensor texture
    yy, xx = np.mgrid[0:side, 0:side] / side
    light = rng.uniform(-1, 1, 2)
    arr *= (1 + 0.12 * (light[0] * (xx - 0.5) + light[1] * (yy - 0.5)))[..., None]
    arr += _smooth_noise(rng, side, 1.0, 4.0)[..., None]
    arr += rng.normal(0, 2.0, size=arr.shape)
    arr = np.clip(arr / 255.0, 0.0, 1.0).astype(np.float32)

    f = 1.0 / _SS
    polys = FacePolygons(
        eyes=[(_rotate(e, cx, cy, tilt) * f).tolist() for e in eyes],
        nose=(_rotate(nose, cx, cy, tilt) * f).tolist(),
        lips=(_rotate(lips, cx, cy, tilt) * f).tolist(),
    )
    polys = polys.map(lambda p: np.clip(p, 0, side))
    return arr, polys


def synthetic_faces(n: int, side: int = 128, seed: int = 0):
    """``(images, polygons)``: ``(n, side, side, 3)`` float32 and a list of FacePolygons."""
    rng = np.random.default_rng(seed)
    imgs, polys = [], []
    for _ in range(n):
        im, p = synthetic_face(rng, side)
        imgs.append(im)
        polys.append(p)
    return np.stack(imgs), polys


def two_face_composite(
    rng: np.random.Generator, height: int = 192, width: int = 320, face_side: tuple[int, int] = (96, 140)
) -> tuple[np.ndarray, list[tuple[int, int, int]], list[FacePolygons]]:
    """Canvas with two non-overlapping faces.

    Returns the image, the square boxes ``(x0, y0, side)`` and each face's
    polygons in canvas coordinates.
    """
    canvas = np.asarray(_background(rng, max(height, width)), dtype=np.float32)
    canvas = zoom(canvas, (1 / _SS, 1 / _SS, 1), order=1)[:height, :width] / 255.0
    boxes, polys = [], []
    half = width // 2
    for k in range(2):
        side = int(rng.integers(face_side[0], min(face_side[1], half, height) + 1))
        x0 = int(rng.integers(k * half, (k + 1) * half - side + 1))
        y0 = int(rng.integers(0, height - side + 1))
        face, p = synthetic_face(rng, side)
        canvas[y0 : y0 + side, x0 : x0 + side] = face
        boxes.append((x0, y0, side))
        polys.append(p.map(lambda q, x0=x0, y0=y0: q + [x0, y0]))
    return np.clip(canvas, 0, 1).astype(np.float32), boxes, polys
