"""Exception types shared across the package."""


class LatentDynError(Exception):
    """Base class for all package errors."""


class UsageError(LatentDynError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class GraphError(LatentDynError):
    """The computation graph is structurally invalid (e.g. contains a cycle)."""


class NumericError(LatentDynError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericError):
    """An integrator produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigurationError(LatentDynError, ValueError):
    """A configuration is infeasible or inconsistent."""


class SamplingError(LatentDynError, ValueError):
    """A time was requested outside the domain of a fitted function."""


class DegenerateError(LatentDynError, ValueError):
    """A normalizing quantity (variance, range) is zero."""
