"""Exception taxonomy shared by all modules."""


class SumGPError(Exception):
    """Base class for all package errors."""


class InputError(SumGPError, ValueError):
    """Caller passed inconsistent shapes, domains or configuration."""


class NumericError(SumGPError, ArithmeticError):
    """A linear-algebra operation failed beyond the jitter policy."""


class TrainingError(SumGPError, RuntimeError):
    """Hyperparameter optimization exhausted its restart budget."""


class IngestError(SumGPError, ValueError):
    """An external data file could not be parsed."""
