"""Versioned checkpoint archives.

A checkpoint is a zip file with two members:

``manifest.json``
    format name and version, architecture config, optional training config,
    step, RNG state, optimizer hyper-parameters and the SHA-256 of the array
    member.
``arrays.npz``
    flat arrays keyed by layer path, e.g. ``model/encoder/unet.head.weight``
    and ``opt_g/decoder/project.bias/exp_avg``.

Archives are written to a temporary file and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError
from .networks import ArchConfig, ModelBundle, init_models

FORMAT = "semifragile-checkpoint"
VERSION = 1


def _arrays_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def write_archive(path: str | os.PathLike, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    payload = _arrays_bytes(arrays)
    manifest = dict(manifest, format=FORMAT, version=VERSION, sha256=hashlib.sha256(payload).hexdigest())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
            zf.writestr("arrays.npz", payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_archive(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("arrays.npz")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    except (zipfile.LargeZipFile, OSError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} archive")
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {manifest.get('version')} is not supported (expected {VERSION})"
        )
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, archive is corrupt")
    with np.load(io.BytesIO(payload)) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return manifest, arrays


def model_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {f"model/{k}": v.cpu().numpy() for k, v in bundle.state_arrays().items()}


def bundle_from_arrays(arch: ArchConfig, arrays: dict[str, np.ndarray], seed: int = 0) -> ModelBundle:
    bundle = init_models(arch, seed)
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    try:
        bundle.load_state_arrays(state)
    except RuntimeError as e:
        raise CheckpointError(f"parameters do not match the architecture: {e}") from e
    return bundle


def check_arch(manifest: dict, expect: ArchConfig | None) -> ArchConfig:
    arch = ArchConfig.from_dict(manifest["arch"])
    if expect is not None and arch != expect:
        raise CheckpointError(f"checkpoint architecture {arch} does not match expected {expect}")
    return arch


def save_model(bundle: ModelBundle, path: str | os.PathLike, meta: dict | None = None) -> None:
    manifest = {"arch": bundle.cfg.to_dict(), "seed": bundle.seed, "meta": meta or bundle.meta}
    write_archive(path, manifest, model_arrays(bundle))


def load_model(path: str | os.PathLike, expect: ArchConfig | None = None) -> ModelBundle:
    """Model parameters from any checkpoint (training state is ignored)."""
    manifest, arrays = read_archive(path)
    arch = check_arch(manifest, expect)
    bundle = bundle_from_arrays(arch, arrays, manifest.get("seed", 0))
    bundle.meta = dict(manifest.get("meta") or {})
    return bundle.eval()
