"""Exception hierarchy shared by every module of the package."""


class ClosureError(Exception):
    """Base class for all errors raised by :mod:`bestfit`."""


class InvalidArgumentError(ClosureError, ValueError):
    pass


class BlowUpError(ClosureError):
    """A microscopic trajectory produced a non-finite state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SamplingError(ClosureError):
    pass


class DivergenceError(SamplingError):
    """The tilted density appears non-normalizable (chain escaped the guard radius)."""


class DegenerateModelError(SamplingError):
    pass


class RankDeficiencyError(DegenerateModelError):
    """Observables (or scores) are numerically linearly dependent.

    ``direction`` holds the approximate null vector in observable coordinates.
    """

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class SolverError(ClosureError):
    pass


class NoSolutionError(SolverError):
    pass


class StepSizeError(SolverError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotApplicableError(SolverError):
    pass


class GridMismatchError(ClosureError):
    pass


class ConfigError(ClosureError):
    pass
