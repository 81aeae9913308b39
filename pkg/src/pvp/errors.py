"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError -> 1, DataError/FormatError/IntegrityError -> 2,
NumericalError -> 3.
"""


class PVPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PVPError):
    """Invalid configuration value or incompatible configuration pair."""


class ShapeError(PVPError):
    """Tensor shapes do not conform for the requested operation."""


class DataError(PVPError):
    """Dataset or episode violates a precondition (empty class, too few samples)."""


class FormatError(PVPError):
    """A binary file does not parse (bad magic, truncation, bad field)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(PVPError):
    """Stored checksum does not match the file contents."""


class NumericalError(PVPError):
    """Training produced a non-finite loss or a numerical check failed."""
