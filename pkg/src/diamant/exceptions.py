"""Exception hierarchy shared by every subsystem."""


class DiamantError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DiamantError, ValueError):
    pass


class DomainError(DiamantError, ValueError):
    """An input lies outside the mathematical domain of an op (log of <= 0, NaN, ...)."""


class ContractError(DiamantError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(DiamantError, ValueError):
    pass


class FormatError(DiamantError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DiamantError, RuntimeError):
    pass


class DataIOError(DiamantError, OSError):
    """Reading or writing a data file failed; the message names the file."""
