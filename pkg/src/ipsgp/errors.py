"""Exception hierarchy shared across modules."""


class NumericalError(RuntimeError):
    """Base class for failures of a numerical routine."""


class IllConditionedError(NumericalError):
    """Cholesky factorization failed even after jitter escalation."""


class NonSPDError(NumericalError):
    """A Krylov iteration met a non-positive curvature direction."""


class IntegrationError(NumericalError):
    """The ODE integrator failed; ``t_fail`` holds the failure time."""

    def __init__(self, message, t_fail=None):
        super().__init__(message)
        self.t_fail = t_fail


class NonFiniteError(NumericalError):
    """A kernel or covariance evaluation produced a non-finite value."""
