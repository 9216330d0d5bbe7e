"""Exception types shared by the pipeline stages."""


class NlrsError(Exception):
    """Base class; ``exit_code`` is what the command line returns."""

    exit_code = 4


class ConfigError(NlrsError, ValueError):
    exit_code = 1


class DomainError(NlrsError, ValueError):
    pass


class RangeError(NlrsError, IndexError):
    pass


class FitUndefinedError(NlrsError, ValueError):
    pass


class PreconditionError(NlrsError, ValueError):
    pass


class SelectionError(NlrsError, ValueError):
    """Some localization box holds no eigenfunction center."""

    def __init__(self, message, empty_boxes=()):
        super().__init__(message)
        self.empty_boxes = list(empty_boxes)


class ResourceError(NlrsError, MemoryError):
    pass


class NumericError(NlrsError, ArithmeticError):
    """Iteration failure; ``dump`` carries the offending data."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class SingularityError(NumericError):
    """A restricted operator is numerically singular near ``vertex``."""

    def __init__(self, message, vertex=None, pivot=None):
        super().__init__(message, {"vertex": vertex, "pivot": pivot})
        self.vertex = vertex
        self.pivot = pivot


class ResonanceFailure(SingularityError):
    """The Newton linearization is singular or ill-conditioned."""


class GaugeViolationError(NumericError):
    pass


class IntegrationError(NumericError):
    def __init__(self, message, last_good_time=None):
        super().__init__(message, {"last_good_time": last_good_time})
        self.last_good_time = last_good_time
