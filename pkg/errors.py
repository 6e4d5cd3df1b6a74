"""
ERRORS - Exception hierarchy for the affect adaptation toolkit
==============================================================
Every failure raised by library code derives from AffectError so the CLI can
report it with a single handler. Each class also derives from the builtin that
best describes it (ValueError for bad input, RuntimeError for bad state).
"""

from typing import Optional


class AffectError(Exception):
    """Base class for all toolkit errors."""


class ImageLoadError(AffectError, ValueError):
    """Missing file, undecodable payload or unsupported channel count."""


class ManifestError(AffectError, ValueError):
    """Malformed manifest row, unknown dataset or degenerate rating scale."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(AffectError, ValueError):
    """Invalid run configuration, weights or training settings."""


class ParamBoundsError(AffectError, ValueError):
    """Transform parameters outside the feasible box."""


class ModelNotTrainedError(AffectError, RuntimeError):
    """Inference requested from a model that was never trained or loaded."""


class ShapeMismatchError(AffectError, ValueError):
    """Activation, latent or timestep shapes do not line up."""


class ProviderUnavailableError(AffectError, RuntimeError):
    """Embedding or caption provider is not initialised."""


class CaptionError(AffectError, RuntimeError):
    """Caption missing from the manifest or remote captioning failed."""


class DivergenceError(AffectError, RuntimeError):
    """Non-finite values produced by an iterative procedure."""


class CorpusTooSmallError(AffectError, ValueError):
    """Training corpus below the minimum size."""
