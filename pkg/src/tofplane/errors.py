"""Exception hierarchy shared by every tofplane module."""


class TofPlaneError(Exception):
    """Base class for all library errors."""


class InvalidGeometryError(TofPlaneError, ValueError):
    pass


class InvalidArgumentError(TofPlaneError, ValueError):
    pass


class DegenerateFitError(TofPlaneError, ValueError):
    pass


class MetricUndefinedError(TofPlaneError, ValueError):
    pass


class InvalidReferenceError(TofPlaneError, ValueError):
    pass


class NoPeakError(TofPlaneError, ValueError):
    pass


class RecoveryFailedError(TofPlaneError, RuntimeError):
    pass


class DegenerateInitError(RecoveryFailedError):
    pass


class EvaluationError(TofPlaneError, ArithmeticError):
    """Objective returned a non-finite value.

    ``params`` holds the parameter values at which evaluation failed.
    """

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


class DataError(TofPlaneError, ValueError):
    """Malformed or inconsistent dataset / parameter file contents."""


class ConfigError(TofPlaneError, ValueError):
    """Bad command-line usage or run configuration."""
