"""
Exception hierarchy for the nodule synthesis pipeline.

Library code raises these; pipeline stages catch them and record the
message on their ProcessingResult.
"""
from typing import Optional


class NoduleGenError(Exception):
    """Base class for all pipeline errors."""


class InvalidLabel(NoduleGenError, ValueError):
    """A mask contains a value outside the six known classes."""


class NumericError(NoduleGenError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class ShapeError(NoduleGenError, ValueError):
    """Tensor or image dimensions do not fit the operation."""


class ConfigError(NoduleGenError, ValueError):
    """Configuration is invalid or contains unknown keys."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class EmptyInput(NoduleGenError, ValueError):
    """An operation received no items."""


class InsufficientSamples(NoduleGenError, ValueError):
    """Too few samples for a statistic or split."""


class NoNoduleRegion(NoduleGenError, ValueError):
    """A mask has no nodule pixels to crop around."""


class IoError(NoduleGenError, OSError):
    """A file could not be read or written."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class FormatError(NoduleGenError, ValueError):
    """A file does not follow its documented binary or JSON format."""


class PairingError(NoduleGenError, ValueError):
    """Two sample sets share no ids to compare."""
