"""Exception hierarchy shared by all gridsense modules."""


class GridSenseError(Exception):
    """Base class for every error raised by gridsense."""


class StructuralError(GridSenseError, ValueError):
    """Bad indices, mismatched dimensions or malformed model data."""


class TemporalOrderError(GridSenseError, ValueError):
    """A time argument lies before the measurement it refers to."""


class DegenerateSystemError(GridSenseError, ValueError):
    """The weighted data matrix is identically zero."""


class NumericalError(GridSenseError, ArithmeticError):
    """A factorization failed on inputs that should have been finite."""


class InsufficientDataError(GridSenseError, ValueError):
    """Too few samples, points or pairs for the requested analysis."""


class DimensionUndefinedError(GridSenseError, ValueError):
    """No scaling region could be found in the correlation sum."""


class ExponentUndefinedError(GridSenseError, ValueError):
    """No neighbours were found at any search radius."""


class InfeasibleOperatingPointError(GridSenseError, RuntimeError):
    """The ground-truth power flow did not converge."""


class ObservabilityError(GridSenseError, ValueError):
    """The measurement set does not determine every bus voltage."""

    def __init__(self, message, unobserved=()):
        super().__init__(message)
        self.unobserved = list(unobserved)


class ParseError(GridSenseError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
