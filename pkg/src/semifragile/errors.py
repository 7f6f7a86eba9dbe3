"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid architecture, training or pipeline configuration."""


class ImageFormatError(ValueError):
    """File exists but is not a decodable PNG/JPEG image."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is corrupt, truncated or incompatible."""


class CheckpointVersionError(CheckpointError):
    pass
