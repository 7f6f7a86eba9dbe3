"""Mini-batch training of the encoder/decoder pair against the patch discriminator.

Each step draws one message per image, watermarks the batch, applies one
sampled benign transform to the whole batch and a per-image malicious
blend, then takes one Adam step on the encoder+decoder followed by one on
the discriminator.  All randomness comes from a single
``numpy.random.Generator`` stored in the training state, so a run resumed
from a checkpoint follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .benign import BenignConfig, TransformSpec, apply_benign, sample_benign
from .data import FaceSet
from .errors import CheckpointError, ConfigError
from .losses import LossBreakdown, LossWeights, discriminator_loss_from_logits, total_encoder_decoder_loss
from .networks import ArchConfig, ModelBundle, init_models

log = logging.getLogger(__name__)

IMAGE_SCALE_RANGE = (0.05, 200.0)
HEALTH_BAND = 0.15  # benign error above the gate at which the message counts as lost


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    batch_size: int = 64
    iterations: int = 100_000
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    image_ramp: float = 0.1
    psnr_target: float | None = None
    psnr_gain: float = 0.002
    malicious_gate: float = 0.2
    malicious_ramp: float = 0.1
    benign: BenignConfig = field(default_factory=BenignConfig)
    use_benign: bool = True
    use_malicious: bool = True
    retention: tuple[float, float] = (0.0, 0.4)
    extractor: str = "luma_gradients"
    jpeg_rounding: str = "ste"
    missing_polygons: str = "error"  # or "skip"
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: int = 1000
    val_images: int = 64

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.benign, dict):
            self.benign = BenignConfig.from_dict(self.benign)
        self.betas = tuple(self.betas)
        self.retention = tuple(self.retention)
        for name in ("batch_size", "iterations", "checkpoint_every", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.psnr_target is not None and not 0 < self.psnr_target < 100:
            raise ConfigError("psnr_target must be in (0, 100) dB")
        if self.psnr_gain < 0:
            raise ConfigError("psnr_gain must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.missing_polygons not in ("error", "skip"):
            raise ConfigError("missing_polygons must be 'error' or 'skip'")
        lo, hi = self.retention
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"retention range {self.retention} must satisfy 0 <= lo <= hi <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["benign"] = self.benign.to_dict()
        d["betas"] = list(self.betas)
        d["retention"] = list(self.retention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    config: TrainConfig
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    best_margin: float = -math.inf
    benign_error: float = 0.5  # running mean of |s - s_b|
    malicious_from: int | None = None
    image_scale: float = 1.0  # see update_image_scale


@dataclass
class StepResult:
    losses: LossBreakdown
    d_loss: float
    spec: TransformSpec
    a_x: float
    a_xw: float
    malicious_weight: float = 0.0
    image_weight: float = 1.0

    def record(self, step: int) -> dict:
        return {
            "step": step,
            **self.losses.to_dict(),
            "d_loss": self.d_loss,
            "a_x": self.a_x,
            "a_xw": self.a_xw,
            "malicious_weight": self.malicious_weight,
            "image_weight": self.image_weight,
            "transform": self.spec.to_dict(),
        }


def init_state(config: TrainConfig) -> TrainState:
    bundle = init_models(config.arch, config.seed)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=config.learning_rate, betas=config.betas)
    return TrainState(bundle, opt_g, opt_d, config, 0, np.random.default_rng(config.seed))


def lock_fraction(state: TrainState) -> float:
    """0 until the running benign message error drops below ``malicious_gate``
    (the decoder has left chance), then a linear ramp to 1 over
    ``malicious_ramp * iterations`` steps."""
    cfg = state.config
    if state.malicious_from is None:
        return 0.0
    ramp = cfg.malicious_ramp * cfg.iterations
    return 1.0 if ramp <= 0 else min(1.0, (state.step - state.malicious_from + 1) / ramp)


def image_weight(config: TrainConfig, step: int, scale: float = 1.0) -> float:
    """Linear warm-up over ``image_ramp * iterations`` steps, times ``scale``."""
    ramp = config.image_ramp * config.iterations
    return scale * (1.0 if ramp <= 0 else min(1.0, (step + 1) / ramp))


def update_image_scale(state: TrainState, mse: float) -> None:
    """Multiplicative controller steering the batch PSNR towards ``psnr_target``.

    Inactive until the decoder has locked on, so early steps stay message-first.
    The log-scale moves by ``psnr_gain`` per dB of error (increases are scaled
    by ``message_health``) and is kept within ``IMAGE_SCALE_RANGE``.
    """
    cfg = state.config
    if cfg.psnr_target is None or state.malicious_from is None:
        return
    psnr_now = -10.0 * math.log10(max(mse, 1e-10))
    lo, hi = IMAGE_SCALE_RANGE
    step = cfg.psnr_gain * (cfg.psnr_target - psnr_now)
    if step > 0:
        step *= message_health(state)
    scale = state.image_scale * math.exp(step)
    state.image_scale = min(hi, max(lo, scale))


def message_health(state: TrainState) -> float:
    """1 while the running benign error is below ``malicious_gate``, falling
    linearly to 0 at ``malicious_gate + HEALTH_BAND``.

    Near chance the benign and tampered message terms cancel, so the
    tampered term and any tightening of the image loss back off before the
    decoder gets there.
    """
    gate = state.config.malicious_gate
    return min(1.0, max(0.0, (gate + HEALTH_BAND - state.benign_error) / HEALTH_BAND))


def malicious_weight(state: TrainState) -> float:
    """Weight of the ``|s - s_m|`` term: lock-on ramp times message health."""
    if not state.config.use_malicious:
        return 0.0
    return lock_fraction(state) * message_health(state)


def _check_finite(params, what: str) -> None:
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {what}")


def train_step(
    state: TrainState, x: torch.Tensor, poly_masks: torch.Tensor | None, rng: np.random.Generator | None = None
) -> StepResult:
    """One generator update followed by one discriminator update (mutates ``state``)."""
    cfg = state.config
    rng = rng if rng is not None else state.rng
    b = state.bundle
    n = x.shape[0]
    L = cfg.arch.message_bits

    s = torch.from_numpy(rng.integers(0, 2, size=(n, L)).astype(np.float32))
    spec = sample_benign(rng, cfg.benign) if cfg.use_benign else TransformSpec("identity")
    w_r = np.array([rng.uniform(*cfg.retention) if cfg.retention[1] > cfg.retention[0] else cfg.retention[0]
                    for _ in range(n)], dtype=np.float32)

    b.encoder.train(), b.decoder.train(), b.discriminator.train()
    plane = b.encoder.message_plane(s)
    x_w = b.encoder(x, s)
    x_b = apply_benign(spec, x_w, jpeg_rounding=cfg.jpeg_rounding)
    if cfg.use_malicious:
        if poly_masks is None:
            raise ValueError("malicious branch needs polygon masks")
        m = 1.0 - (1.0 - torch.from_numpy(w_r).view(n, 1, 1, 1)) * poly_masks
        x_m = m * x_w + (1.0 - m) * x
        probs, maps = b.decoder(torch.cat([x_b, x_m]))
        s_b, s_m = probs[:n], probs[n:]
        dec_plane = maps[:n]
    else:
        s_b, dec_plane = b.decoder(x_b)
        s_m = s
    z_xw = b.discriminator.logits(x_w)
    mw = malicious_weight(state)
    iw = image_weight(cfg, state.step, state.image_scale)

    losses = total_encoder_decoder_loss(
        x, x_w, s, s_b, s_m, None, cfg.weights,
        plane=torch.nn.functional.interpolate(plane, size=dec_plane.shape[-2:], mode="bilinear",
                                              align_corners=False),
        decoded_plane=dec_plane,
        image_weight=iw,
        malicious_weight=mw,
        z_xw=z_xw,
        extractor=cfg.extractor,
    )
    state.opt_g.zero_grad(set_to_none=True)
    losses.total.backward()
    _check_finite(b.generator_parameters(), "encoder/decoder")
    state.opt_g.step()

    z_x = b.discriminator.logits(x)
    z_xw_d = b.discriminator.logits(x_w.detach())
    d_loss = discriminator_loss_from_logits(z_x, z_xw_d)
    a_x, a_xw_d = torch.sigmoid(z_x), torch.sigmoid(z_xw_d)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    _check_finite(b.discriminator.parameters(), "discriminator")
    state.opt_d.step()

    update_image_scale(state, float(losses.l2.detach()))
    err = float((s - s_b.detach()).abs().mean())
    state.benign_error = 0.95 * state.benign_error + 0.05 * err
    if state.malicious_from is None and state.benign_error < cfg.malicious_gate:
        state.malicious_from = state.step
        log.info("step %d: malicious term enabled", state.step)
    state.step += 1
    return StepResult(losses, float(d_loss.detach()), spec, float(a_x.detach().mean()),
                      float(a_xw_d.detach().mean()), mw, iw)


def sample_batch(state: TrainState, data: FaceSet) -> tuple[torch.Tensor, torch.Tensor | None]:
    cfg = state.config
    idx = state.rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=len(data) < cfg.batch_size)
    if cfg.use_malicious:
        ok = data.has_polygons(idx)
        if not ok.all():
            if cfg.missing_polygons == "error":
                bad = [data.names[i] for i in np.asarray(idx)[~ok]]
                raise ValueError(f"no facial polygons for {bad[:5]}")
            log.warning("skipping %d images without polygons", int((~ok).sum()))
            idx = np.asarray(idx)[ok]
            if len(idx) == 0:
                raise ValueError("batch has no images with polygons")
    return data.batch(idx)


# -- checkpoints -------------------------------------------------------------

def _opt_arrays(prefix: str, opt: torch.optim.Optimizer, names: list[str]) -> dict[str, np.ndarray]:
    out = {}
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{names[idx]}/{key}"] = torch.as_tensor(val).cpu().numpy()
    return out


def _load_opt(prefix: str, opt: torch.optim.Optimizer, names: list[str], arrays, groups) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, name in enumerate(names):
        keys = [k for k in arrays if k.startswith(f"{prefix}/{name}/")]
        if keys:
            state[idx] = {k.rsplit("/", 1)[1]: torch.from_numpy(arrays[k].copy()) for k in keys}
    for g, saved in zip(sd["param_groups"], groups):
        saved = {k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()}
        saved["params"] = g["params"]
        g.update(saved)
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def _groups(opt) -> list[dict]:
    out = []
    for g in opt.state_dict()["param_groups"]:
        out.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items() if k != "params"})
    return out


def save_checkpoint(state: TrainState, path: str | os.PathLike, meta: dict | None = None) -> None:
    b = state.bundle
    arrays = ckpt.model_arrays(b)
    arrays.update(_opt_arrays("opt_g", state.opt_g, b.generator_parameter_names()))
    arrays.update(_opt_arrays("opt_d", state.opt_d, b.discriminator_parameter_names()))
    manifest = {
        "arch": b.cfg.to_dict(),
        "seed": b.seed,
        "train_config": state.config.to_dict(),
        "step": state.step,
        "best_margin": None if state.best_margin == -math.inf else state.best_margin,
        "benign_error": state.benign_error,
        "malicious_from": state.malicious_from,
        "image_scale": state.image_scale,
        "rng": state.rng.bit_generator.state,
        "opt_g_groups": _groups(state.opt_g),
        "opt_d_groups": _groups(state.opt_d),
        "meta": meta or b.meta,
    }
    ckpt.write_archive(path, manifest, arrays)


def load_checkpoint(path: str | os.PathLike, expect: ArchConfig | None = None) -> TrainState:
    manifest, arrays = ckpt.read_archive(path)
    arch = ckpt.check_arch(manifest, expect)
    if "train_config" not in manifest:
        raise CheckpointError(f"{path}: model-only checkpoint has no training state")
    config = TrainConfig.from_dict(manifest["train_config"])
    state = init_state(config)
    state.bundle = ckpt.bundle_from_arrays(arch, arrays, manifest.get("seed", 0))
    state.bundle.meta = dict(manifest.get("meta") or {})
    b = state.bundle
    state.opt_g = torch.optim.Adam(b.generator_parameters(), lr=config.learning_rate, betas=config.betas)
    state.opt_d = torch.optim.Adam(b.discriminator.parameters(), lr=config.learning_rate, betas=config.betas)
    _load_opt("opt_g", state.opt_g, b.generator_parameter_names(), arrays, manifest["opt_g_groups"])
    _load_opt("opt_d", state.opt_d, b.discriminator_parameter_names(), arrays, manifest["opt_d_groups"])
    state.step = int(manifest["step"])
    bm = manifest.get("best_margin")
    state.best_margin = -math.inf if bm is None else float(bm)
    state.benign_error = float(manifest["benign_error"])
    state.malicious_from = manifest["malicious_from"]
    state.image_scale = float(manifest.get("image_scale", 1.0))
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    state.rng = rng
    return state


# -- loop --------------------------------------------------------------------

def validate(bundle: ModelBundle, data: FaceSet, seed: int = 1234, batch: int = 16) -> dict:
    """Identity-transform and w_r=0 tampering BRA plus PSNR/SSIM on ``data``."""
    from .evaluation import bit_recovery_accuracy
    from .imaging import from_batch, quality_report

    rng = np.random.default_rng(seed)
    benign, malicious, psnrs, ssims = [], [], [], []
    bundle.eval()
    with torch.no_grad():
        for start in range(0, len(data), batch):
            idx = np.arange(start, min(len(data), start + batch))
            x, pm = data.batch(idx)
            s = rng.integers(0, 2, size=(len(idx), bundle.cfg.message_bits)).astype(np.float32)
            x_w = bundle.encoder(x, torch.from_numpy(s))
            s_b = bundle.decoder(x_w)[0].numpy()
            benign += [bit_recovery_accuracy(a, b) for a, b in zip(s, s_b)]
            if pm is not None:
                x_m = (1 - pm) * x_w + pm * x
                s_m = bundle.decoder(x_m)[0].numpy()
                malicious += [bit_recovery_accuracy(a, b) for a, b in zip(s, s_m)]
            for o, w in zip(from_batch(x), from_batch(x_w)):
                q = quality_report(o, w)
                psnrs.append(q.psnr)
                ssims.append(q.ssim)
    out = {
        "bra_identity": float(np.mean(benign)),
        "bra_tamper_w0": float(np.mean(malicious)) if malicious else None,
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
    }
    out["margin"] = out["bra_identity"] - (out["bra_tamper_w0"] if malicious else 50.0)
    return out


def train(
    config: TrainConfig,
    train_set: FaceSet,
    out_dir: str | os.PathLike,
    val_set: FaceSet | None = None,
    resume: str | os.PathLike | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Run (or resume) training; writes ``metrics.jsonl``, ``last.ckpt`` and ``best.ckpt``.

    ``stop_after`` ends the call early at that step (the state stays resumable).
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if train_set.side != config.arch.side:
        raise ConfigError(f"images are {train_set.side}px but the architecture expects {config.arch.side}px")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume, config.arch) if resume else init_state(config)
    cfg = state.config
    config.save(out / "config.json")
    metrics = open(out / "metrics.jsonl", "a")
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    t0 = time.time()
    try:
        while state.step < end:
            x, pm = sample_batch(state, train_set)
            res = train_step(state, x, pm)
            rec = res.record(state.step)
            if val_set is not None and len(val_set) and (
                state.step % cfg.validate_every == 0 or state.step == cfg.iterations
            ):
                v = validate(state.bundle, val_set.subset(range(min(len(val_set), cfg.val_images))))
                rec["validation"] = v
                log.info("step %d validation %s", state.step, v)
                if v["margin"] > state.best_margin:
                    state.best_margin = v["margin"]
                    save_checkpoint(state, out / "best.ckpt", meta={"validation": v})
            metrics.write(json.dumps(rec) + "\n")
            if state.step % 50 == 0:
                metrics.flush()
                log.info("step %d  total %.4f  l_m %.4f  l2 %.2e  image weight %.3g  %.2fs/step",
                         state.step, rec["total"], rec["l_m"], rec["l2"], rec["image_weight"],
                         (time.time() - t0) / 50)
                t0 = time.time()
            if state.step % cfg.checkpoint_every == 0 or state.step == end:
                save_checkpoint(state, out / "last.ckpt")
    finally:
        metrics.close()
    return state
