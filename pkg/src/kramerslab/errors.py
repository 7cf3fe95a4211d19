"""Exception hierarchy shared by all modules."""


class KramersError(Exception):
    """Base class for toolkit errors."""


class ValidationError(KramersError, ValueError):
    """Input fails a structural check (shape, symmetry, sign)."""


class NotSPDError(ValidationError):
    """Matrix is symmetric but not positive definite."""


class AssumptionError(ValidationError):
    """A problem descriptor violates a standing analytic hypothesis."""


class ConfigurationError(KramersError, ValueError):
    """Run parameters are inconsistent or out of the supported range."""


class UnsupportedError(KramersError, NotImplementedError):
    """Requested computation is deliberately not implemented."""


class DivergedError(KramersError, ArithmeticError):
    """A trajectory left the finite region.

    Attributes
    ----------
    step : int
        Step index at which the divergence was detected.
    count : int
        Number of diverged trajectories.
    """

    def __init__(self, message, step=-1, count=1):
        super().__init__(message)
        self.step = step
        self.count = count


class AlignmentError(ValidationError):
    """Paired arrays live on different grids."""


class QuadratureError(KramersError, ArithmeticError):
    """Adaptive quadrature did not reach its tolerance."""


class SolverError(KramersError, ArithmeticError):
    """A linear solve did not reach its residual tolerance."""
