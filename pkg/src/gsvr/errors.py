"""Exception hierarchy shared across the package."""


class GsvrError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(GsvrError, ValueError):
    """A caller-supplied argument violates a precondition."""


class NumericalDegeneracyError(GsvrError, ArithmeticError):
    """A covariance fell below the eigenvalue floor and cannot be inverted."""


class TrainingDivergedError(GsvrError, RuntimeError):
    """The optimization produced non-finite values."""


class UnsupportedFormatError(GsvrError, ValueError):
    """A file uses a feature outside the supported format subset."""


class UndefinedMetricError(GsvrError, ArithmeticError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""
