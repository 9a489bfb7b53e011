"""Exception types shared across the package."""


class EMAEError(Exception):
    """Base class for all package errors."""


class InvalidConfiguration(EMAEError, ValueError):
    pass


class InvalidPair(EMAEError, ValueError):
    pass


class ShapeError(EMAEError, ValueError):
    pass


class FormatError(EMAEError, ValueError):
    """Malformed dataset or checkpoint file. Carries the byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCheckpoint(EMAEError):
    pass


class NumericAbort(EMAEError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
