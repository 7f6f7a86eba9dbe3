import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import convolve

from semifragile.benign import (
    KINDS,
    BenignConfig,
    TransformSpec,
    adjust_contrast,
    adjust_saturation,
    affine_source_coords,
    apply_benign,
    blur_sigma,
    down_up_sample,
    gaussian_blur,
    gaussian_kernel2d,
    sample_benign,
    translate_rotate,
)


def rand_img(seed=0, shape=(2, 3, 24, 24), lo=0.0, hi=1.0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(shape, generator=g, dtype=dtype)


# -- blur --------------------------------------------------------------------

def test_blur_sigma_rule():
    assert blur_sigma(3) == pytest.approx(0.8)
    assert blur_sigma(5) == pytest.approx(1.1)
    assert blur_sigma(7) == pytest.approx(1.4)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_blur_constant(k):
    x = torch.full((1, 3, 16, 16), 0.37)
    assert torch.allclose(gaussian_blur(x, k), x, atol=1e-6)


def test_blur_impulse_gives_kernel():
    x = torch.zeros(1, 3, 9, 9)
    x[..., 4, 4] = 1.0
    y = gaussian_blur(x, 3)
    k = gaussian_kernel2d(3)
    assert torch.allclose(y[0, 0, 3:6, 3:6], k, atol=1e-7)
    assert y.sum().item() == pytest.approx(3.0, abs=1e-5)


def test_blur_k7_dense_oracle():
    x = rand_img(1, (1, 3, 20, 20), dtype=torch.float64)
    k = gaussian_kernel2d(7, torch.float64).numpy()
    y = gaussian_blur(x, 7).numpy()
    for c in range(3):
        # numpy "mirror" is edge-excluded reflection, the same as torch "reflect"
        ref = convolve(x[0, c].numpy(), k, mode="mirror")
        assert np.abs(y[0, c] - np.clip(ref, 0, 1)).max() < 1e-12


@pytest.mark.parametrize("k", [2, 4, 9, 1])
def test_blur_bad_kernel(k):
    with pytest.raises(ValueError):
        gaussian_blur(torch.zeros(1, 3, 8, 8), k)


# -- colour ------------------------------------------------------------------

def test_saturation_examples():
    x = rand_img(2)
    assert torch.equal(adjust_saturation(x, 1.0), x)
    g = adjust_saturation(x, 0.0)
    assert torch.allclose(g[:, 0], g[:, 1]) and torch.allclose(g[:, 1], g[:, 2])
    red = torch.tensor([1.0, 0.0, 0.0]).view(1, 3, 1, 1)
    out = adjust_saturation(red, 0.5).flatten().tolist()
    assert out == pytest.approx([0.6495, 0.1495, 0.1495], abs=1e-6)
    for w in (-0.1, 1.1):
        with pytest.raises(ValueError):
            adjust_saturation(x, w)


def test_contrast_examples():
    x = rand_img(3)
    assert torch.equal(adjust_contrast(x, 1.0), x)
    c = torch.full((1, 3, 8, 8), 0.4)
    assert torch.allclose(adjust_contrast(c, 1.4), c, atol=1e-7)
    x = rand_img(4, lo=0.3, hi=0.7)
    mu = (x * torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)).sum(1, keepdim=True).mean((1, 2, 3), keepdim=True)
    assert torch.allclose(adjust_contrast(x, 0.5) - mu, 0.5 * (x - mu), atol=1e-6)
    for f in (0.0, -1.0):
        with pytest.raises(ValueError):
            adjust_contrast(x, f)


# -- resampling --------------------------------------------------------------

def two_pass_bilinear(img, out_h, out_w):
    """Separable half-pixel bilinear resize of an (H, W) array, rows then columns."""

    def axis_weights(n_in, n_out):
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            s = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
            i0 = min(int(math.floor(s)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            m[i, i0] += 1 - (s - i0)
            m[i, i1] += s - i0
        return m

    return axis_weights(img.shape[0], out_h) @ img @ axis_weights(img.shape[1], out_w).T


def test_down_up_constant_and_oracle():
    c = torch.full((1, 3, 32, 32), 0.6)
    assert torch.allclose(down_up_sample(c, 3.3), c, atol=1e-6)
    x = rand_img(5, (1, 3, 32, 32), dtype=torch.float64)
    y = down_up_sample(x, 2.0).numpy()
    for ch in range(3):
        ref = two_pass_bilinear(two_pass_bilinear(x[0, ch].numpy(), 16, 16), 32, 32)
        assert np.abs(y[0, ch] - ref).max() < 1e-12
    with pytest.raises(ValueError):
        down_up_sample(x, 0.5)


def test_down_up_low_pass():
    i, j = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    board = torch.from_numpy(((i + j) % 2).astype(np.float32)).expand(1, 3, 32, 32)
    assert down_up_sample(board, 4.0).var() < board.var()


# -- geometry ----------------------------------------------------------------

def reflect_coord(v, n):
    """Reflection about the pixel borders -0.5 and n-0.5."""
    period = 2 * n
    v = (v + 0.5) % period
    v = np.where(v >= n, period - v, v)
    return v - 0.5


def rotate_oracle(img, n_h, n_w, r):
    """Inverse-map every output pixel, reflect at the border and sample bilinearly."""
    c, h, w = img.shape
    theta = math.radians(r)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            dy, dx = i - cy - n_h, j - cx - n_w
            sx = math.cos(theta) * dx - math.sin(theta) * dy + cx
            sy = math.sin(theta) * dx + math.cos(theta) * dy + cy
            sy, sx = float(reflect_coord(sy, h)), float(reflect_coord(sx, w))
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            acc = 0.0
            for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    if wy * wx == 0:
                        continue
                    acc = acc + wy * wx * img[:, min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
            out[:, i, j] = acc
    return out


def test_translate_rotate_identity():
    x = rand_img(6)
    assert torch.equal(translate_rotate(x, 0, 0, 0.0), x)


def test_integer_shift_inverse():
    x = rand_img(7, (1, 3, 24, 24))
    y = translate_rotate(translate_rotate(x, 3, 0, 0.0), -3, 0, 0.0)
    assert torch.allclose(y[..., :-3, :], x[..., :-3, :], atol=1e-6)
    y = translate_rotate(translate_rotate(x, 0, -4, 0.0), 0, 4, 0.0)
    assert torch.allclose(y[..., :, 4:], x[..., :, 4:], atol=1e-6)


def test_integer_shift_direction_and_fill():
    x = rand_img(8, (1, 3, 10, 10))
    y = translate_rotate(x, 2, 1, 0.0)
    assert torch.equal(y[..., 2:, 1:], x[..., :-2, :-1])
    # the exposed band is a mirror of the edge, edge pixel repeated
    assert torch.equal(y[..., 1, 1:], x[..., 0, :-1])
    assert torch.equal(y[..., 0, 1:], x[..., 1, :-1])


def test_fast_shift_equals_resampling_path():
    x = rand_img(9, (1, 3, 16, 16), dtype=torch.float64)
    fast = translate_rotate(x, -5, 7, 0.0)
    slow = translate_rotate(x, -5.0 + 1e-12, 7, 1e-12)
    assert torch.allclose(fast, slow, atol=1e-8)


@pytest.mark.parametrize("params", [(0, 0, 10.0), (3, -2, -7.5), (-10, 10, 4.0)])
def test_rotation_oracle(params):
    x = rand_img(10, (1, 3, 20, 20), dtype=torch.float64)
    y = translate_rotate(x, *params)[0].numpy()
    ref = np.clip(rotate_oracle(x[0].numpy(), *params), 0, 1)
    assert np.abs(y - ref).max() < 1e-9


def test_rotation_direction():
    sy, sx = affine_source_coords(11, 11, 0, 0, 90.0)
    # counter-clockwise: the right-middle output pixel shows the bottom-middle input
    assert (round(sy[5, 10]), round(sx[5, 10])) == (10, 5)


# -- specs and sampling ------------------------------------------------------

def test_identity_parameters_reproduce_input():
    x = rand_img(11)
    for spec in (TransformSpec("identity"), TransformSpec("saturation", {"w": 1.0}),
                 TransformSpec("contrast", {"factor": 1.0}),
                 TransformSpec("translate_rotate", {"n_h": 0, "n_w": 0, "r": 0.0}),
                 TransformSpec("down_up", {"scale": 1.0})):
        assert torch.equal(apply_benign(spec, x), x), spec


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_every_transform_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    spec = sample_benign(rng)
    x = rand_img(seed % 1000, (1, 3, 32, 32))
    y = apply_benign(spec, x)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1 and torch.isfinite(y).all()


def test_sampling_uniform_over_kinds():
    rng = np.random.default_rng(0)
    counts = {k: 0 for k in KINDS}
    for _ in range(7000):
        counts[sample_benign(rng).kind] += 1
    sigma = math.sqrt(7000 * (1 / 7) * (6 / 7))
    assert all(abs(c - 1000) <= 4 * sigma for c in counts.values()), counts


def test_sampling_ranges_and_determinism():
    specs = [sample_benign(np.random.default_rng(5)) for _ in range(2)]
    assert specs[0] == specs[1]
    rng = np.random.default_rng(1)
    for _ in range(3000):
        s = sample_benign(rng)
        p = s.params
        if s.kind == "contrast":
            assert 0.5 <= p["factor"] <= 1.5
        elif s.kind == "gaussian_blur":
            assert p["k"] in (3, 5, 7)
        elif s.kind == "jpeg":
            assert p["quality"] in (40, 60, 80)
        elif s.kind == "saturation":
            assert 0 <= p["w"] <= 1
        elif s.kind == "down_up":
            assert 2 <= p["scale"] <= 5
        elif s.kind == "translate_rotate":
            assert -10 <= p["n_h"] <= 10 and -10 <= p["n_w"] <= 10 and -10 <= p["r"] <= 10
            assert isinstance(p["n_h"], int)


def test_spec_round_trip():
    cfg = BenignConfig(kinds=("identity", "jpeg"), jpeg_qualities=(50,))
    assert BenignConfig.from_dict(cfg.to_dict()) == cfg
    s = TransformSpec("jpeg", {"quality": 50})
    assert TransformSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        TransformSpec("sepia")


# -- gradients ---------------------------------------------------------------

SPECS = [
    TransformSpec("gaussian_blur", {"k": 5}),
    TransformSpec("jpeg", {"quality": 80, "rounding": "none"}),
    TransformSpec("saturation", {"w": 0.3}),
    TransformSpec("contrast", {"factor": 1.2}),
    TransformSpec("down_up", {"scale": 2.5}),
    TransformSpec("translate_rotate", {"n_h": 3, "n_w": -2, "r": 6.0}),
    TransformSpec("translate_rotate", {"n_h": 2, "n_w": 1, "r": 0.0}),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label())
def test_finite_difference_gradients(spec):
    x = rand_img(12, (4, 3, 16, 16), lo=0.3, hi=0.7, dtype=torch.float64).requires_grad_(True)
    weights = rand_img(13, (4, 3, 16, 16), dtype=torch.float64)
    (apply_benign(spec, x) * weights).sum().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(10):
        idx = tuple(int(rng.integers(n)) for n in x.shape)
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += eps
        xm[idx] -= eps
        fd = ((apply_benign(spec, xp) - apply_benign(spec, xm)) * weights).sum().item() / (2 * eps)
        an = x.grad[idx].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-8), (spec, idx, fd, an)
