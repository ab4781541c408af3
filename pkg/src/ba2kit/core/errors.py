"""
Exception hierarchy for ba2kit.

Every error derives from ``BA2Error`` and from the closest builtin so callers
catching ``ValueError`` or ``KeyError`` keep working.
"""


class BA2Error(Exception):
    """Base class for all ba2kit errors."""


class ShapeError(BA2Error, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(BA2Error, ArithmeticError):
    """A tensor holds NaN or Inf where finite values are required."""


class TapeError(BA2Error, RuntimeError):
    """Misuse of the autodiff tape (missing context, non-scalar loss, ...)."""


class ConfigError(BA2Error, ValueError):
    """Invalid configuration or parameter value."""


class DataError(BA2Error, ValueError):
    """Malformed dataset file, checksum failure or label out of range."""


class ArchitectureMismatchError(BA2Error, ValueError):
    """An adapter does not fit the backbone architecture."""


class MissingBankError(BA2Error, KeyError):
    """No batch-norm entry for the requested (domain, budget)."""


class NotFoundError(BA2Error, KeyError):
    """Registry lookup failed."""


class ComplianceError(BA2Error, RuntimeError):
    """Stored budget-compliance flags disagree with the recomputed masks."""


class StoreError(BA2Error, ValueError):
    """Base class for serialization errors."""


class BadMagicError(StoreError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(StoreError):
    """File format version is not understood."""


class TruncatedFileError(StoreError):
    """File ended before the declared layout was complete."""


class PaddingBitsError(StoreError):
    """Padding bits of a packed switch vector are not zero."""


class ArchHashMismatchError(StoreError, ArchitectureMismatchError):
    """Stored architecture hash differs from the backbone's."""
