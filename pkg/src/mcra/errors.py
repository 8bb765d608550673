"""Exception hierarchy shared across the package."""


class McraError(Exception):
    """Base class for all package errors."""


class ContractViolation(McraError, ValueError):
    """An argument broke a documented precondition (bad shape, negative power, ...)."""


class FormatError(McraError):
    """A file on disk does not follow the expected layout."""


class TruncationError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class NumericFailure(McraError, ArithmeticError):
    """A computation produced a non-finite or otherwise impossible value."""


class TrainingFailure(NumericFailure):
    pass


class PlanError(McraError):
    """An experiment plan references something that cannot be resolved."""
