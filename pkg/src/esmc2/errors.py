"""Exception hierarchy shared by every module."""


class ESMC2Error(Exception):
    """Base class for errors raised by this package."""


class DomainError(ESMC2Error, ValueError):
    """An argument lies outside the domain of the operation."""


class PreconditionError(DomainError):
    """A documented precondition (e.g. ensemble size bound) does not hold."""


class InvalidStateError(DomainError):
    """A latent state is non-finite or otherwise malformed."""


class NumericalError(ESMC2Error, ArithmeticError):
    """An internal invariant broke during a numerical update."""


class DegenerateWeightsError(ESMC2Error):
    """Every weight is zero (every log-weight is -inf or NaN)."""


class ParticleCollapseError(DegenerateWeightsError):
    """A particle filter lost all of its particles at step ``t``."""

    def __init__(self, t, message="particle collapse", diagnostics=None):
        self.t = t
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{message} at t={t}")


class DegeneratePopulationError(DegenerateWeightsError):
    """All parameter particles carry zero weight.

    ``history`` holds whatever was recorded before the failure so callers can
    still write partial output.
    """

    def __init__(self, t, history=None, diagnostics=None):
        self.t = t
        self.history = history
        self.diagnostics = diagnostics
        super().__init__(f"all parameter particles have zero weight at t={t}")


class SingularProposalError(ESMC2Error, ArithmeticError):
    """The empirical parameter covariance cannot be factorised."""


class ConfigError(ESMC2Error, ValueError):
    """Invalid experiment configuration."""


class DataValidationError(ESMC2Error, ValueError):
    """Malformed incidence data; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
