"""Exception hierarchy used across the package."""


class StackingError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(StackingError):
    """Array shapes disagree with what an operation requires."""


class ParameterError(StackingError):
    """A scalar parameter (alpha, resolution, ...) is out of range."""


class DomainError(StackingError):
    """An input value lies outside the mathematical domain of an operation."""


class ConfigurationError(StackingError):
    """The requested computation needs an input that was not provided."""


class NumericalError(StackingError):
    """A numerical routine failed (non-finite loss, factorization failure)."""


class SchemaError(StackingError):
    """A serialized artifact does not conform to its file format."""


class CapacityError(StackingError):
    """A sampling request exceeds the available pool of draws."""


class EvaluationError(StackingError):
    """Holdout evaluation cannot run (e.g. no test rows)."""
