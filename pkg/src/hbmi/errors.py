"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems are caught by argparse,
``DataError`` subclasses exit with 2 and ``NumericalError`` with 3.
"""


class HbmiError(Exception):
    """Base class for all package errors."""


class DataError(HbmiError, ValueError):
    """Input data violates a documented precondition."""


class RateMismatchError(DataError):
    pass


class InsufficientDurationError(DataError):
    pass


class InvalidFilterError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DomainError(DataError):
    """Negative values where non-negative data is required."""


class DatasetFormatError(DataError):
    """A file could not be parsed; message carries file and line."""


class ValidationError(DataError):
    pass


class StratificationError(DataError):
    pass


class ModelIncompleteError(DataError):
    pass


class NumericalError(HbmiError, ArithmeticError):
    """A matrix was too badly conditioned to factorize."""
