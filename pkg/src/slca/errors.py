"""Exception types shared across the package."""


class SlcaError(Exception):
    """Base class for all package errors."""


class RejectedInputError(SlcaError, ValueError):
    """An argument violates a shape, range or configuration precondition."""


class NumericError(SlcaError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class FormatError(SlcaError, ValueError):
    """A binary file (dataset or checkpoint) is malformed."""


class UndefinedMetricError(SlcaError, ValueError):
    """A metric cannot be computed for the given labels."""
