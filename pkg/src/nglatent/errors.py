"""Exception types shared across the package."""


class NglatentError(Exception):
    """Base class for all package-specific errors."""


class ParameterDomainError(NglatentError, ValueError):
    """A parameter lies outside its admissible domain."""


class UnsupportedFamilyError(NglatentError, ValueError):
    """Operation not defined for the requested noise family."""


class InputError(NglatentError, ValueError):
    """Malformed or dimensionally inconsistent input."""


class AssemblyError(InputError):
    """Model components do not fit together; message names the offender."""


class ParameterLookupError(NglatentError, KeyError):
    """Unknown parameter name."""


class NumericalError(NglatentError, RuntimeError):
    """A numerical routine failed (factorization, divergence, ...)."""


class FactorizationError(NumericalError):
    """Sparse factorization failed; message names the conditioning issue."""


class OptimizationError(NumericalError):
    """Optimizer produced a non-finite state; carries the trace so far."""

    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces


class SamplingError(NumericalError):
    """Posterior sampler diverged; carries the last valid state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class DegenerateSamplesError(NglatentError, ValueError):
    """A score is undefined for the given (degenerate) sample set."""


class ConfigError(NglatentError, ValueError):
    """Invalid run configuration; message names the offending key."""
