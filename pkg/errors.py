"""Error kinds raised across the toolkit.

The CLI maps these onto exit codes: I/O-like errors exit 2, validation-like
errors exit 3.
"""
from typing import Optional, Sequence


class SSCANError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(SSCANError, ValueError):
    """A tensor or grid shape does not satisfy an operation's contract."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ContractError(SSCANError, ValueError):
    """A precondition other than a shape was violated."""


class ConfigValidationError(SSCANError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingWeightError(SSCANError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing weight '{self.name}'"


class UnsupportedFormatError(SSCANError):
    """An image file uses a PNG flavour outside 8-bit, non-interlaced L/RGB."""


class MissingPairError(SSCANError, OSError):
    def __init__(self, filename: str, expected: Optional[str] = None):
        message = f"no pair mate for {filename}"
        if expected:
            message += f" (expected {expected})"
        super().__init__(message)
        self.message = message
        self.missing = filename

    def __str__(self) -> str:
        return self.message


class WeightFormatError(SSCANError):
    """Base class for weight-container decoding failures."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


class CorruptEntryError(WeightFormatError):
    pass


class ChecksumMismatchError(WeightFormatError):
    pass


class TrailingDataError(WeightFormatError):
    pass


class GradientCheckError(SSCANError):
    """Raised by the gradient-check runner when a suite exceeds its tolerance."""
