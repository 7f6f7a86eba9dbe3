"""Training objectives.

Generator side (encoder + decoder)::

    total = L1(x, x_w) + L2(x, x_w) + c_p * perceptual(x, x_w)
            + c_g * log(1 - A(x_w))
            + c_M * (|s - s_b|_1 - |s - s_m|_1)
            [+ c_aux * |plane(s) - decoded_plane|_1]

Discriminator side::

    log(1 - W(x)) + log(W(x_w))

The two adversarial terms read the discriminator in opposite directions.
The network outputs ``A``, the probability that an image is an original
(unwatermarked) one; the generator minimizes ``log(1 - A(x_w))``, pushing
``A(x_w)`` up.  The discriminator objective is written in terms of
``W = 1 - A``, the probability of being watermarked, and is *ascended*: its
maximum 0 is reached at ``W(x) = 0, W(x_w) = 1``.  Training minimizes its
negative, which is the usual binary cross-entropy.

Probabilities are clamped to ``[EPS, 1 - EPS]`` before any logarithm.
The ``*_from_logits`` variants used in training compute the same values in
log space from per-patch logits; they clamp the value but let the gradient
through, so a saturated sigmoid cannot freeze the discriminator.  All
L1/L2 terms are means, so values are comparable across image sizes and
message lengths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .benign import luminance
from .errors import ConfigError

EPS = 1e-6


@dataclass
class LossWeights:
    c_p: float = 1.0
    c_g: float = 0.1
    c_M: float = 2.0
    c_aux: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {k}={v} must be finite and non-negative")


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    l2: torch.Tensor
    lpips: torch.Tensor
    l_g: torch.Tensor
    l_d_img: torch.Tensor  # L_d + c_g * L_G
    l_m: torch.Tensor
    l_aux: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.__dict__.items()}


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def message_loss(s, s_b, s_m, malicious_weight: float = 1.0) -> torch.Tensor:
    """Mean |s - s_b| minus ``malicious_weight`` times mean |s - s_m|; in [-1, 1] at weight 1."""
    s, s_b, s_m = (torch.as_tensor(t, dtype=torch.float32) if not torch.is_tensor(t) else t
                   for t in (s, s_b, s_m))
    if not (s.shape == s_b.shape == s_m.shape):
        raise ValueError("message, benign and malicious predictions must have equal lengths")
    s = s.to(s_b.dtype)
    benign = (s - s_b).abs().mean()
    if not malicious_weight:
        return benign
    return benign - malicious_weight * (s - s_m).abs().mean()


# -- perceptual distance -----------------------------------------------------

_SOBEL = torch.tensor([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]]) / 4


def luma_gradient_features(img: torch.Tensor, scales: int = 3) -> list[torch.Tensor]:
    """Sobel gradients of luminance at ``scales`` dyadic resolutions."""
    y = luminance(img)
    k = _SOBEL.to(img)
    kern = torch.stack([k, k.T]).unsqueeze(1)
    feats = []
    for i in range(scales):
        if i:
            y = F.avg_pool2d(y, 2)
        feats.append(F.conv2d(F.pad(y, (1, 1, 1, 1), mode="replicate"), kern))
    return feats


def identity_features(img: torch.Tensor) -> list[torch.Tensor]:
    return [img]


EXTRACTORS: dict[str, Callable[[torch.Tensor], list[torch.Tensor]]] = {
    "identity": identity_features,
    "luma_gradients": luma_gradient_features,
}


def perceptual_distance(x: torch.Tensor, x_w: torch.Tensor, extractor="luma_gradients") -> torch.Tensor:
    """Mean squared feature difference, averaged over feature maps.

    ``extractor`` is a name in ``EXTRACTORS`` or a callable returning a list
    of feature tensors (e.g. a pretrained network's activations).  The
    ``"identity"`` extractor reduces this to the pixel L2 distance.
    """
    _check(x, x_w)
    if callable(extractor):
        fn = extractor
    elif extractor in EXTRACTORS:
        fn = EXTRACTORS[extractor]
    else:
        raise ConfigError(f"perceptual extractor {extractor!r} is not available")
    fa, fb = fn(x), fn(x_w)
    return torch.stack([((a - b) ** 2).mean() for a, b in zip(fa, fb)]).mean()


def image_distortion_loss(x, x_w, weights: LossWeights, extractor="luma_gradients"):
    """``(L_d, l1, l2, lpips)`` with ``L_d = l1 + l2 + c_p * lpips``."""
    _check(x, x_w)
    l1 = (x - x_w).abs().mean()
    l2 = ((x - x_w) ** 2).mean()
    lp = perceptual_distance(x, x_w, extractor) if weights.c_p else torch.zeros_like(l1)
    return l1 + l2 + weights.c_p * lp, l1, l2, lp


def _clamp(a) -> torch.Tensor:
    a = a if torch.is_tensor(a) else torch.tensor(float(a), dtype=torch.float64)
    return a.clamp(EPS, 1 - EPS)


def generator_adversarial_loss(a_xw) -> torch.Tensor:
    """``log(1 - A(x_w))`` averaged over the batch, ``A`` = P(original); minimized by the generator."""
    return torch.log1p(-_clamp(a_xw)).mean()


def discriminator_loss(w_x, w_xw) -> torch.Tensor:
    """``log(1 - W(x)) + log(W(x_w))``, batch mean, ``W`` = P(watermarked).

    The discriminator ascends this; it is 0 at the optimum.
    """
    return (torch.log1p(-_clamp(w_x)) + torch.log(_clamp(w_xw))).mean()


_LOG_LO, _LOG_HI = math.log(EPS), math.log1p(-EPS)


def _clamp_value(v: torch.Tensor) -> torch.Tensor:
    return v + (v.clamp(_LOG_LO, _LOG_HI) - v).detach()


def log_mean_sigmoid(z: torch.Tensor) -> torch.Tensor:
    """``log(mean(sigmoid(z)))`` over all but the batch axis, computed stably."""
    z = z.flatten(1)
    return torch.logsumexp(F.logsigmoid(z), dim=1) - math.log(z.shape[1])


def generator_adversarial_loss_from_logits(z_xw: torch.Tensor) -> torch.Tensor:
    """Same value as ``generator_adversarial_loss`` of the patch-mean probability."""
    return _clamp_value(log_mean_sigmoid(-z_xw)).mean()


def discriminator_loss_from_logits(z_x: torch.Tensor, z_xw: torch.Tensor) -> torch.Tensor:
    """Training loss of the discriminator from logits of ``A`` = P(original).

    Equals ``-discriminator_loss(1 - mean A(x), 1 - mean A(x_w))``, so
    minimizing it ascends the discriminator objective.
    """
    return -(_clamp_value(log_mean_sigmoid(z_x)) + _clamp_value(log_mean_sigmoid(-z_xw))).mean()


def total_encoder_decoder_loss(
    x,
    x_w,
    s,
    s_b,
    s_m,
    a_xw,
    weights: LossWeights,
    plane=None,
    decoded_plane=None,
    image_weight: float = 1.0,
    extractor="luma_gradients",
    malicious_weight: float = 1.0,
    z_xw=None,
) -> LossBreakdown:
    """Joint generator objective.

    ``image_weight`` scales the image terms and ``malicious_weight`` the
    ``|s - s_m|`` part of the message term (both used for warm-up ramps); at
    1.0 the total is exactly ``L_d + c_g * L_G + c_M * L_M (+ c_aux * aux)``.
    Passing per-patch logits ``z_xw`` instead of ``a_xw`` selects the
    log-space adversarial term.
    """
    l_d, l1, l2, lp = image_distortion_loss(x, x_w, weights, extractor)
    if not weights.c_g:
        l_g = torch.zeros_like(l_d)
    elif z_xw is not None:
        l_g = generator_adversarial_loss_from_logits(z_xw).to(l_d.dtype)
    else:
        l_g = generator_adversarial_loss(a_xw).to(l_d.dtype)
    l_m = message_loss(s, s_b, s_m, malicious_weight).to(l_d.dtype)
    l_img = l_d + weights.c_g * l_g
    total = image_weight * l_img + weights.c_M * l_m
    l_aux = torch.zeros_like(l_d)
    if weights.c_aux and plane is not None and decoded_plane is not None:
        l_aux = (plane - decoded_plane).abs().mean()
        total = total + weights.c_aux * l_aux
    return LossBreakdown(l1, l2, lp, l_g, l_img, l_m, l_aux, total)
