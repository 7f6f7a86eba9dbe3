"""Semi-fragile neural watermarks for face images.

The encoder hides an ``L``-bit message in an image so that it survives
benign processing (compression, colour and geometry jitter) but is
destroyed when facial regions are altered.
"""

from .errors import CheckpointError, CheckpointVersionError, ConfigError, ImageFormatError
from .networks import ArchConfig, ModelBundle, decode, discriminate, encode, init_models

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CheckpointError",
    "CheckpointVersionError",
    "ConfigError",
    "ImageFormatError",
    "ModelBundle",
    "decode",
    "discriminate",
    "encode",
    "init_models",
]
