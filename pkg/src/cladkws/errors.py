"""Exception types shared across the package."""


class CladError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CladError):
    """A configuration value or combination is unusable."""


class ContractError(CladError):
    """A caller violated an API precondition (shapes, counts, ordering)."""


class DomainError(CladError, ValueError):
    """An input is outside the mathematical domain of an operation."""


class NumericError(CladError, ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ParseError(CladError):
    """A file could not be decoded. ``offset`` is the byte offset (or line
    number for line-oriented formats) where decoding failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class TrainingError(CladError):
    """Training diverged or could not proceed. Carries the failing epoch."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class UsageError(CladError):
    """Bad command-line invocation. ``hint`` suggests a remediation."""

    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint
