"""Encoder, decoder and patch discriminator.

Both encoder and decoder are U-Nets whose upsampling path is a 3x3
convolution followed by nearest-neighbour interpolation (no transposed
convolutions).  The message enters the encoder as a fourth input plane:
a learned linear projection to ``proj_side x proj_side`` that is bilinearly
resized to the image side.  The decoder mirrors this: its single-channel
full-resolution output is bilinearly resized to ``proj_side`` and mapped to
``message_bits`` probabilities by a linear layer and a sigmoid.

Tensors are batched ``(B, C, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class ArchConfig:
    side: int = 256
    message_bits: int = 128
    proj_side: int = 96
    depth: int = 8
    widths: tuple[int, ...] = (32, 64, 128, 256, 256, 256, 256, 256)
    disc_widths: tuple[int, ...] = (64, 128, 256)
    patch: int = 32

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "disc_widths", tuple(int(w) for w in self.disc_widths))
        if self.side < 1 or self.message_bits < 1 or self.proj_side < 1:
            raise ConfigError("side, message_bits and proj_side must be positive")
        if self.depth < 1 or self.side % (2**self.depth):
            raise ConfigError(f"side={self.side} is not divisible by 2**depth={2**self.depth}")
        if len(self.widths) != self.depth:
            raise ConfigError(f"expected {self.depth} widths, got {len(self.widths)}")
        if len(self.disc_widths) != 3:
            raise ConfigError("the patch discriminator has exactly three stride-2 blocks")
        if self.patch % 8 or self.side % self.patch:
            raise ConfigError(f"patch={self.patch} must be a multiple of 8 dividing side={self.side}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def desk(cls, side: int = 64, message_bits: int = 16, base: int = 16) -> "ArchConfig":
        """Reduced-width variant for CPU-scale runs; depth follows ``side``."""
        depth = side.bit_length() - 1
        if 2**depth != side:
            raise ConfigError("desk configs need a power-of-two side")
        widths = tuple(min(base * 2**i, base * 8) for i in range(depth))
        return cls(
            side=side,
            message_bits=message_bits,
            proj_side=max(8, round(96 * side / 256)),
            depth=depth,
            widths=widths,
            disc_widths=(base * 2, base * 4, base * 8),
        )


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, norm: bool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class UpBlock(nn.Module):
    """3x3 convolution, then x2 nearest-neighbour upsampling."""

    def __init__(self, cin: int, cout: int, norm: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True) if norm else nn.Identity()

    def forward(self, x):
        x = F.interpolate(self.conv(x), scale_factor=2, mode="nearest")
        return F.relu(self.norm(x))


class UNet(nn.Module):
    def __init__(self, cin: int, cout: int, widths: Sequence[int], side: int):
        super().__init__()
        self.downs = nn.ModuleList()
        prev = cin
        for i, w in enumerate(widths):
            out_side = side // 2 ** (i + 1)
            # instance norm over a 1x1 map is identically zero
            self.downs.append(DownBlock(prev, w, norm=0 < i and out_side > 1))
            prev = w
        self.ups = nn.ModuleList()
        depth = len(widths)
        for i in reversed(range(depth)):
            cin_up = widths[i] if i == depth - 1 else widths[i] * 2
            cout_up = widths[i - 1] if i > 0 else widths[0]
            self.ups.append(UpBlock(cin_up, cout_up))
        self.head = nn.Conv2d(widths[0] + cin, cout, 3, padding=1)

    def forward(self, x):
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.ups[0](skips[-1])
        for up, skip in zip(self.ups[1:], reversed(skips[:-1])):
            h = up(torch.cat([h, skip], dim=1))
        return self.head(torch.cat([h, x], dim=1))


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.project = nn.Linear(cfg.message_bits, cfg.proj_side**2)
        self.unet = UNet(4, 3, cfg.widths, cfg.side)
        # small residual at init keeps the first watermarked images close to x
        nn.init.normal_(self.unet.head.weight, std=1e-3)
        nn.init.zeros_(self.unet.head.bias)

    def message_plane(self, bits: torch.Tensor) -> torch.Tensor:
        p = self.cfg.proj_side
        return self.project(2.0 * bits - 1.0).view(-1, 1, p, p)

    def residual(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        plane = F.interpolate(
            self.message_plane(bits), size=x.shape[-2:], mode="bilinear", align_corners=False
        )
        return self.unet(torch.cat([x - 0.5, plane], dim=1))

    def forward(self, x, bits):
        return (x + self.residual(x, bits)).clamp(0.0, 1.0)


class Decoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(3, 1, cfg.widths, cfg.side)
        self.project = nn.Linear(cfg.proj_side**2, cfg.message_bits)

    def intermediate(self, img: torch.Tensor) -> torch.Tensor:
        """Full-resolution map resized to ``proj_side``, shape ``(B, 1, p, p)``."""
        p = self.cfg.proj_side
        m = self.unet(img - 0.5)
        return F.interpolate(m, size=(p, p), mode="bilinear", align_corners=False)

    def forward(self, img):
        m = self.intermediate(img)
        return torch.sigmoid(self.project(m.flatten(1))), m


class PatchDiscriminator(nn.Module):
    """Scores non-overlapping ``patch x patch`` tiles: probability the tile is unwatermarked."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.patch = cfg.patch
        w1, w2, w3 = cfg.disc_widths
        self.blocks = nn.Sequential(
            DownBlock(3, w1, norm=False),
            DownBlock(w1, w2, norm=True),
            DownBlock(w2, w3, norm=True),
        )
        self.score = nn.Conv2d(w3, 1, cfg.patch // 8)

    def logits(self, img):
        b, c, h, w = img.shape
        p = self.patch
        tiles = img.unfold(2, p, p).unfold(3, p, p)  # b, c, nh, nw, p, p
        nh, nw = tiles.shape[2], tiles.shape[3]
        tiles = tiles.permute(0, 2, 3, 1, 4, 5).reshape(b * nh * nw, c, p, p)
        return self.score(self.blocks(tiles - 0.5)).view(b, nh, nw)

    def forward(self, img):
        return torch.sigmoid(self.logits(img))


@dataclass
class ModelBundle:
    cfg: ArchConfig
    encoder: Encoder
    decoder: Decoder
    discriminator: PatchDiscriminator
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def generator_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def generator_parameter_names(self) -> list[str]:
        return [f"encoder/{n}" for n, _ in self.encoder.named_parameters()] + [
            f"decoder/{n}" for n, _ in self.decoder.named_parameters()
        ]

    def discriminator_parameter_names(self) -> list[str]:
        return [f"discriminator/{n}" for n, _ in self.discriminator.named_parameters()]

    def modules(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "decoder": self.decoder, "discriminator": self.discriminator}

    def parameter_count(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in m.parameters()) for k, m in self.modules().items()}

    def state_arrays(self) -> dict[str, torch.Tensor]:
        """Flat ``{"encoder/unet.head.weight": tensor, ...}`` mapping."""
        out = {}
        for name, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                out[f"{name}/{k}"] = v.detach().clone()
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        for name, mod in self.modules().items():
            prefix = f"{name}/"
            sd = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            mod.load_state_dict(sd)

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self


def init_models(cfg: ArchConfig | None = None, seed: int = 0) -> ModelBundle:
    cfg = cfg or ArchConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = Encoder(cfg)
        dec = Decoder(cfg)
        disc = PatchDiscriminator(cfg)
    return ModelBundle(cfg, enc, dec, disc, seed=seed)


def _check_images(bundle: ModelBundle, img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 3:
        img = img.unsqueeze(0)
    s = bundle.cfg.side
    if img.dim() != 4 or img.shape[1] != 3 or img.shape[-2:] != (s, s):
        raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(img.shape)}")
    return img


def _check_bits(bundle: ModelBundle, bits, batch: int) -> torch.Tensor:
    bits = torch.as_tensor(bits, dtype=torch.float32)
    if bits.dim() == 1:
        bits = bits.unsqueeze(0)
    if bits.shape[-1] != bundle.cfg.message_bits:
        raise ValueError(f"message length {bits.shape[-1]} != L={bundle.cfg.message_bits}")
    if bits.shape[0] == 1 and batch > 1:
        bits = bits.expand(batch, -1)
    if bits.shape[0] != batch:
        raise ValueError("one message per image (or a single shared message) is required")
    return bits


def encode(bundle: ModelBundle, x: torch.Tensor, bits) -> torch.Tensor:
    x = _check_images(bundle, x)
    return bundle.encoder(x, _check_bits(bundle, bits, x.shape[0]))


def decode(bundle: ModelBundle, img: torch.Tensor, return_map: bool = False):
    probs, m = bundle.decoder(_check_images(bundle, img))
    return (probs, m) if return_map else probs


def discriminate(bundle: ModelBundle, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-patch scores ``(B, side/patch, side/patch)`` and their per-image mean."""
    scores = bundle.discriminator(_check_images(bundle, img))
    return scores, scores.mean(dim=(1, 2))
