"""Exception hierarchy.

Validation problems derive from ``ValidationError`` and numerical failures
from ``NumericalError``; the CLI maps the two families to exit codes 1 and 2.
"""


class BgreError(Exception):
    """Base class for all package errors."""


class ValidationError(BgreError, ValueError):
    pass


class NumericalError(BgreError, ArithmeticError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class UnknownDgp(ValidationError):
    pass


class InvalidK(ValidationError):
    pass


class InvalidLevel(ValidationError):
    pass


class MissingCovariates(ValidationError):
    pass


class SingularDesign(NumericalError):
    pass


class NumericalSingularity(NumericalError):
    pass


class NoFeasibleGroup(NumericalError):
    """No mixture component passes the slice indicator for some unit."""


class ChainDiverged(NumericalError):
    pass


class DegeneratePredictive(NumericalError):
    pass
