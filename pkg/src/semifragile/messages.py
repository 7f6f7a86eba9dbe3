"""Secret messages: keyed generation, hex serialization, hardening.

A message is a ``uint8`` vector of 0/1 of length ``L``; decoder outputs are
"soft bits" in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from pathlib import Path

import numpy as np

DEFAULT_BITS = 128
KEY_ENV = "SEMIFRAGILE_KEY"

_HEX = set("0123456789abcdefABCDEF")


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("a message is a non-empty 1-d bit vector")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("message bits must be 0 or 1")
    return arr.astype(np.uint8)


def generate_message(key: bytes, context: bytes = b"", length: int = DEFAULT_BITS) -> np.ndarray:
    """HMAC-SHA256 of ``context`` under ``key``, expanded in counter mode to ``length`` bits."""
    if not key:
        raise ValueError("key must be non-empty")
    if length < 1:
        raise ValueError("length must be positive")
    if isinstance(key, str):
        key = key.encode()
    if isinstance(context, str):
        context = context.encode()
    stream = b""
    counter = 0
    while len(stream) * 8 < length:
        stream += hmac.new(key, counter.to_bytes(4, "big") + context, hashlib.sha256).digest()
        counter += 1
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8))
    return bits[:length].astype(np.uint8)


def bits_to_hex(bits) -> str:
    """Big-endian lowercase hex; the first bit is the MSB of the first digit."""
    b = as_bits(bits)
    if b.size % 4:
        raise ValueError("hex serialization needs a bit length divisible by 4")
    nibbles = b.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    return "".join("0123456789abcdef"[n] for n in nibbles)


def hex_to_bits(h: str, length: int = DEFAULT_BITS) -> np.ndarray:
    if length % 4 or len(h) != length // 4:
        raise ValueError(f"expected {length // 4} hex characters for L={length}, got {len(h)}")
    if not set(h) <= _HEX:
        raise ValueError(f"invalid hex string {h!r}")
    nibbles = np.array([int(c, 16) for c in h], dtype=np.uint8)
    return ((nibbles[:, None] >> np.array([3, 2, 1, 0])) & 1).reshape(-1).astype(np.uint8)


def harden(soft) -> np.ndarray:
    """Threshold at 0.5 (ties go to 1)."""
    return (np.asarray(soft) >= 0.5).astype(np.uint8)


def soften(bits, margin: float = 0.05) -> np.ndarray:
    """Map bit ``b`` to ``(1 - 2*margin)*b + margin``."""
    return (1.0 - 2.0 * margin) * as_bits(bits).astype(np.float64) + margin


def random_messages(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, length), dtype=np.uint8)


def load_key(key_file: str | os.PathLike | None = None, env: str = KEY_ENV) -> bytes:
    """Raw key bytes from ``key_file`` if given, else from the environment."""
    if key_file is not None:
        key = Path(key_file).read_bytes()
    else:
        key = os.environ.get(env, "").encode()
    if not key:
        raise ValueError(f"no key: pass a key file or set ${env}")
    return key
