"""Exception types raised across the package."""


class OSRError(Exception):
    """Base class for all package errors."""


class ContractError(OSRError, ValueError):
    """An input violates a documented precondition (shape, range, finiteness)."""


class ConfigurationError(OSRError, ValueError):
    """A configuration cannot be satisfied (too few classes, bad grid, ...)."""


class DataError(OSRError, ValueError):
    """Malformed or inconsistent data (parse failures, unknown labels)."""


class DivergenceError(OSRError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")


class InsufficientTailError(OSRError, ValueError):
    """Too few points to fit a tail distribution."""


class DegenerateTailError(OSRError, ValueError):
    """Tail values have (numerically) zero spread."""


class UnsupportedError(OSRError, ValueError):
    """The requested operation is not supported for this input (e.g. dimension)."""


class DomainError(OSRError, ValueError):
    """Argument outside the mathematical domain of a function."""
