"""Exception types raised across the package."""


class UwnoError(Exception):
    """Base class for all package errors."""


class DimensionError(UwnoError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(UwnoError, ValueError):
    """A documented precondition on argument values was violated."""


class StateError(UwnoError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class NonFiniteError(UwnoError, FloatingPointError):
    """A forward result contained NaN or Inf."""


class FormatError(UwnoError, ValueError):
    """A checkpoint file is malformed.

    Attributes:
        offset: byte offset in the file where validation failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IngestionError(UwnoError, OSError):
    """An input image or mask could not be read."""
