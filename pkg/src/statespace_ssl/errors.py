"""Exception hierarchy shared by every module in the package."""


class StateSpaceSSLError(Exception):
    """Base class for all package errors."""


class ShapeError(StateSpaceSSLError, ValueError):
    """Raised on invalid or mismatched tensor / image shapes."""


class InvalidArgumentError(StateSpaceSSLError, ValueError):
    """Raised when an argument violates an operation's precondition."""


class DomainError(StateSpaceSSLError, ValueError):
    """Raised when an input is outside a function's mathematical domain."""


class DegenerateInputError(DomainError):
    """Raised for zero-norm vectors where a direction is required."""


class TapeError(StateSpaceSSLError, RuntimeError):
    """Raised when backward is requested on a detached or consumed graph."""


class FormatError(StateSpaceSSLError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte (or line) position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class CorruptCheckpointError(StateSpaceSSLError, ValueError):
    """Bad magic, unsupported version, checksum failure, or config mismatch."""


class ConfigError(StateSpaceSSLError, ValueError):
    """Invalid training config file or value."""


class NonFiniteError(StateSpaceSSLError, FloatingPointError):
    """A gradient or loss became NaN/inf."""


class DatasetError(StateSpaceSSLError, ValueError):
    """Dataset directory is missing, empty, or has an empty class."""
