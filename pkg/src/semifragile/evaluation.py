"""Bit recovery, capacity, transform benchmarks, ROC analysis and the copy attack.

Watermarked images are quantized to 8 bits before any evaluation transform,
as they would be when written to disk.  JPEG at evaluation time uses the
real codec rather than the differentiable surrogate.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .benign import TransformSpec, apply_benign
from .data import FaceSet
from .imaging import from_batch, jpeg_roundtrip, quality_report, to_batch
from .messages import as_bits, harden
from .networks import ModelBundle

# full-scale reference numbers, kept alongside desk results for context
REFERENCE = {
    "psnr": 36.08,
    "ssim": 0.975,
    "bra_identity": 99.68,
    "bra_jpeg50": 98.38,
    "bra_faceswap": 31.77,
    "auc": 0.996,
    "multiface_bra": 99.50,
    "copy_attack_bra": 17.6,
}


def bit_recovery_accuracy(s, s_hat) -> float:
    """Percentage of bits of ``s`` matched by ``s_hat`` hardened at 0.5."""
    s = as_bits(s)
    s_hat = np.asarray(s_hat, dtype=np.float64).ravel()
    if s.shape != s_hat.shape:
        raise ValueError(f"message length {s.size} != decoded length {s_hat.size}")
    return 100.0 * float(np.mean(harden(s_hat) == s))


def bpp(L: int, H: int, W: int, C: int) -> float:
    """Bits per pixel ``L / (H W C)``."""
    for name, v in zip("LHWC", (L, H, W, C)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return L / (H * W * C)


# -- evaluation transforms --------------------------------------------------

@dataclass(frozen=True)
class EvalTransform:
    """A named evaluation condition.

    ``op`` is one of ``{"benign": TransformSpec dict}``, ``{"codec_jpeg": q}``
    or ``{"tamper": w_r}`` (blend the original back inside the facial
    polygons, keeping ``w_r`` of the watermark).
    """

    name: str
    category: str  # "benign" or "malicious"
    op: dict

    def __post_init__(self):
        if self.category not in ("benign", "malicious"):
            raise ValueError(f"category must be benign or malicious, got {self.category!r}")
        if len(self.op) != 1 or next(iter(self.op)) not in ("benign", "codec_jpeg", "tamper"):
            raise ValueError(f"bad evaluation op {self.op!r}")

    def apply(self, x_w: torch.Tensor, x: torch.Tensor, poly_mask: torch.Tensor | None) -> torch.Tensor:
        (kind, arg), = self.op.items()
        if kind == "benign":
            return apply_benign(TransformSpec.from_dict(arg), x_w, jpeg_rounding="none").clamp(0, 1)
        if kind == "codec_jpeg":
            return to_batch([jpeg_roundtrip(im, int(arg)) for im in from_batch(x_w)])
        if poly_mask is None:
            raise ValueError(f"{self.name}: tampering needs polygon masks")
        m = 1.0 - (1.0 - float(arg)) * poly_mask
        return m * x_w + (1 - m) * x


def benign(name: str, kind: str, **params) -> EvalTransform:
    return EvalTransform(name, "benign", {"benign": {"kind": kind, "params": params}})


def default_transforms() -> list[EvalTransform]:
    """The desk benchmark: training-range and held-out benign edits plus mask tampering."""
    return [
        benign("identity", "identity"),
        EvalTransform("codec_jpeg_80", "benign", {"codec_jpeg": 80}),
        EvalTransform("codec_jpeg_50", "benign", {"codec_jpeg": 50}),
        benign("saturation_0.5", "saturation", w=0.5),
        benign("contrast_0.7", "contrast", factor=0.7),
        benign("contrast_1.3", "contrast", factor=1.3),
        benign("blur_5", "gaussian_blur", k=5),
        benign("down_up_2", "down_up", scale=2.0),
        benign("shift_rotate", "translate_rotate", n_h=4, n_w=-3, r=5.0),
        EvalTransform("tamper_w0", "malicious", {"tamper": 0.0}),
        EvalTransform("tamper_w0.2", "malicious", {"tamper": 0.2}),
        EvalTransform("tamper_w0.4", "malicious", {"tamper": 0.4}),
    ]


# -- ROC --------------------------------------------------------------------

def roc_auc(benign_bra: Sequence[float], malicious_bra: Sequence[float]):
    """ROC of the detector "manipulated iff BRA <= t" and its trapezoidal AUC.

    Thresholds sweep every observed BRA value.  Returns ``(fpr, tpr, thresholds), auc``
    with manipulated images as positives.
    """
    neg = np.asarray(benign_bra, dtype=np.float64)
    pos = np.asarray(malicious_bra, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both benign and malicious BRA lists must be nonempty")
    thresholds = np.unique(np.concatenate([neg, pos]))
    tpr = np.array([0.0] + [np.mean(pos <= t) for t in thresholds])
    fpr = np.array([0.0] + [np.mean(neg <= t) for t in thresholds])
    thresholds = np.concatenate([[-np.inf], thresholds])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return (fpr, tpr, thresholds), auc


# -- report -----------------------------------------------------------------

@dataclass
class EvalReport:
    per_image: dict[str, list[float]]  # transform name -> BRA per test image
    categories: dict[str, str]
    psnr: list[float]
    ssim: list[float]
    bpp: float
    roc: dict = field(default_factory=dict)
    auc: float | None = None
    notes: dict = field(default_factory=dict)

    def table(self) -> dict[str, dict]:
        return {
            k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "category": self.categories[k]}
            for k, v in self.per_image.items()
        }

    def mean(self, name: str) -> float:
        return float(np.mean(self.per_image[name]))

    def detector(self, benign_names=None, malicious_names=None) -> float:
        """Fit the BRA-threshold ROC over the chosen conditions; stores curve and AUC."""
        benign_names = benign_names or [k for k, c in self.categories.items() if c == "benign"]
        malicious_names = malicious_names or [k for k, c in self.categories.items() if c == "malicious"]
        neg = np.concatenate([self.per_image[k] for k in benign_names])
        pos = np.concatenate([self.per_image[k] for k in malicious_names])
        (fpr, tpr, thr), auc = roc_auc(neg, pos)
        self.roc = {
            "fpr": fpr.tolist(),
            "tpr": tpr.tolist(),
            "thresholds": [None if not np.isfinite(t) else float(t) for t in thr],
            "negatives": list(benign_names),
            "positives": list(malicious_names),
        }
        self.auc = auc
        return auc

    def to_dict(self) -> dict:
        return {
            "table": self.table(),
            "quality": {
                "psnr_mean": float(np.mean(self.psnr)),
                "ssim_mean": float(np.mean(self.ssim)),
                "psnr": self.psnr,
                "ssim": self.ssim,
            },
            "bpp": self.bpp,
            "auc": self.auc,
            "roc": self.roc,
            "per_image": self.per_image,
            "categories": self.categories,
            "reference_full_scale": REFERENCE,
            "notes": self.notes,
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(
            d["per_image"], d["categories"], d["quality"]["psnr"], d["quality"]["ssim"],
            d["bpp"], d.get("roc") or {}, d.get("auc"), d.get("notes") or {},
        )


def _quantize_t(t: torch.Tensor) -> torch.Tensor:
    return torch.round(t.clamp(0, 1) * 255) / 255


@torch.no_grad()
def embed_batch(bundle: ModelBundle, x: torch.Tensor, bits: np.ndarray) -> torch.Tensor:
    """Watermark and quantize to 8 bits."""
    bundle.eval()
    return _quantize_t(bundle.encoder(x, torch.as_tensor(bits, dtype=torch.float32)))


@torch.no_grad()
def decode_bra(bundle: ModelBundle, img: torch.Tensor, bits: np.ndarray) -> list[float]:
    bundle.eval()
    probs = bundle.decoder(img)[0].numpy()
    return [bit_recovery_accuracy(s, p) for s, p in zip(bits, probs)]


def transform_benchmark(
    bundle: ModelBundle,
    testset: FaceSet,
    transforms: Sequence[EvalTransform] | None = None,
    seed: int = 0,
    batch: int = 16,
) -> EvalReport:
    """BRA per image under each transform, plus PSNR/SSIM of the watermarked images."""
    if len(testset) == 0:
        raise ValueError("test set is empty")
    transforms = list(transforms) if transforms is not None else default_transforms()
    names = [t.name for t in transforms]
    if len(set(names)) != len(names):
        raise ValueError("transform names must be unique")
    rng = np.random.default_rng(seed)
    L = bundle.cfg.message_bits
    bits = rng.integers(0, 2, size=(len(testset), L)).astype(np.uint8)
    per = {t.name: [] for t in transforms}
    psnrs, ssims = [], []
    for start in range(0, len(testset), batch):
        idx = np.arange(start, min(len(testset), start + batch))
        x, pm = testset.batch(idx)
        x_w = embed_batch(bundle, x, bits[idx])
        for o, w in zip(from_batch(x), from_batch(x_w)):
            q = quality_report(o, w)
            psnrs.append(q.psnr)
            ssims.append(q.ssim)
        for t in transforms:
            with torch.no_grad():
                y = _quantize_t(t.apply(x_w, x, pm))
            per[t.name] += decode_bra(bundle, y, bits[idx])
    s = bundle.cfg.side
    return EvalReport(per, {t.name: t.category for t in transforms}, psnrs, ssims, bpp(L, s, s, 3),
                      notes={"transforms": [asdict(t) for t in transforms], "seed": seed, "n": len(testset)})


def perturbation_copy_attack(
    bundle: ModelBundle,
    source_images: torch.Tensor,
    target_images: torch.Tensor,
    messages: np.ndarray,
    batch: int = 16,
) -> float:
    """Mean BRA when the residual of each watermarked source is added to its paired target."""
    if source_images.shape != target_images.shape:
        raise ValueError(f"source {tuple(source_images.shape)} and target {tuple(target_images.shape)} differ")
    messages = np.asarray(messages)
    if messages.shape != (source_images.shape[0], bundle.cfg.message_bits):
        raise ValueError("need one message of length L per source image")
    out = []
    for start in range(0, source_images.shape[0], batch):
        sl = slice(start, start + batch)
        x, t = source_images[sl], target_images[sl]
        delta = embed_batch(bundle, x, messages[sl]) - x
        forged = _quantize_t(t + delta)
        out += decode_bra(bundle, forged, messages[sl])
    return float(np.mean(out))


def plot_report(report: EvalReport, out_dir: str | os.PathLike) -> list[Path]:
    """ROC curve and BRA bar chart as PNG files (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    tab = report.table()
    fig, ax = plt.subplots(figsize=(8, 3.5))
    names = list(tab)
    colors = ["tab:blue" if tab[n]["category"] == "benign" else "tab:red" for n in names]
    ax.bar(names, [tab[n]["mean"] for n in names], yerr=[tab[n]["std"] for n in names], color=colors)
    ax.set_ylabel("BRA (%)")
    ax.set_ylim(0, 105)
    ax.tick_params(axis="x", rotation=60)
    fig.tight_layout()
    paths.append(out / "bra.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    if report.roc:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(report.roc["fpr"], report.roc["tpr"], drawstyle="steps-post")
        ax.plot([0, 1], [0, 1], ls=":", c="gray")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(f"AUC = {report.auc:.3f}")
        fig.tight_layout()
        paths.append(out / "roc.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    return paths
