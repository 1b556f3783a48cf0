"""
Error types raised by the toolkit.

Every failure the domain code can report derives from ``PavecrackError``
so the management commands can turn them into a clean ``CommandError``.
Value-type failures also derive from ``ValueError`` and I/O failures from
``OSError``; callers that only care about the broad family can keep
catching the builtin.
"""

from __future__ import annotations


class PavecrackError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(PavecrackError, ValueError):
    """An experiment or tiling configuration is invalid."""


class DimensionError(PavecrackError, ValueError):
    """A tiling grid does not fit the frame along ``axis``."""

    def __init__(self, message: str, *, axis: str) -> None:
        super().__init__(message)
        self.axis = axis


class FormatError(PavecrackError, ValueError):
    """A raster is not an 8-bit, 3-channel image."""


class GeometryError(PavecrackError, ValueError):
    """A transform cannot be applied to a raster of this shape."""


class ShapeError(PavecrackError, ValueError):
    """Inputs that must line up (lengths, grids, histories) do not."""


class DomainError(PavecrackError, ValueError):
    """A numeric argument lies outside its allowed range."""


class CapacityError(PavecrackError, ValueError):
    """Not enough samples to satisfy the requested split sizes."""

    def __init__(self, message: str, *, shortfall: int = 0) -> None:
        super().__init__(message)
        self.shortfall = shortfall


class DataError(PavecrackError, ValueError):
    """A data stream or count set cannot be used as given."""


class DivergenceError(PavecrackError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, epoch: int) -> None:
        super().__init__(message)
        self.epoch = epoch


class UndefinedBoostError(PavecrackError, ValueError):
    """A fine-tune boost was requested for a single-phase history."""


class UniquenessError(PavecrackError, ValueError):
    """Two experiments share the same (backbone, variant) key."""


class ManifestError(PavecrackError, ValueError):
    """A manifest file cannot be parsed."""


class ProvenanceError(PavecrackError, OSError):
    """A pretrained archive is missing or cannot be loaded."""


class IntegrityError(PavecrackError, ValueError):
    """A pretrained archive does not match its recorded digest."""


class PersistenceError(PavecrackError, OSError):
    """An artifact (sample, checkpoint, table, figure) cannot be read or written."""
