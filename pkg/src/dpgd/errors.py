"""Exception types shared across the package."""


class DpgdError(Exception):
    """Base class for all package errors."""


class ParameterError(DpgdError, ValueError):
    """An argument violates a documented precondition."""


class DecodeError(DpgdError):
    """A raster file could not be decoded."""


class FormatError(DpgdError):
    """A raster file has an unsupported layout or bit depth."""


class TrainingError(DpgdError):
    """Training diverged or otherwise failed. Carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class AttackError(DpgdError):
    """An attack iteration produced invalid values (e.g. NaN gradients)."""


class UnsupportedOperationError(DpgdError):
    """The denoiser does not support the requested operation."""


class DegenerateGeometryError(DpgdError):
    """Circle sampling basis is degenerate (v parallel to n or zero)."""


class ModelFormatError(DpgdError):
    """Model container version/spec mismatch."""


class ChecksumError(DpgdError):
    """Model container payload failed its integrity check."""


class ConfigError(DpgdError):
    """An experiment configuration document is invalid."""
