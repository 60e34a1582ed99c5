"""Exception types shared across the package."""


class FsalError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FsalError, ValueError):
    """Tensor shape does not match what an operation requires."""


class ConfigError(FsalError, ValueError):
    """Invalid configuration value or combination."""


class DegeneratePairError(FsalError, RuntimeError):
    """Source and target embeddings coincide exactly; distance gradient undefined."""


class ModelFormatError(FsalError, ValueError):
    """Model file is corrupt, truncated, or has an unsupported version."""


class TrainingDivergedError(FsalError, RuntimeError):
    """Training loss became non-finite."""


class InsufficientDataError(FsalError, ValueError):
    """Not enough images/pairs to satisfy a sampling or calibration request."""
