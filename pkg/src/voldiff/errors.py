"""Exception hierarchy shared across the package."""


class VoldiffError(Exception):
    """Base class for all package-specific errors."""


class VolumeError(VoldiffError, ValueError):
    """Invalid volume data or metadata."""


class DegenerateVolumeError(VolumeError):
    """Volume has no intensity variation (constant grid)."""


class NonFiniteError(VolumeError):
    """Volume payload contains NaN or Inf values."""


class ShapeMismatchError(VolumeError):
    """Declared shape disagrees with actual payload."""


class SidecarError(VolumeError):
    """Missing or malformed sidecar metadata file."""


class ConfigError(VoldiffError, ValueError):
    """Invalid experiment configuration."""


class CheckpointError(VoldiffError):
    """Broken or incompatible checkpoint archive."""


class TrainingDivergedError(VoldiffError):
    """Loss became non-finite during training."""


class SamplingError(VoldiffError):
    """Reverse diffusion produced a non-finite intermediate."""
