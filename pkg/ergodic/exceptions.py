class ErgodicError(RuntimeError):
    """Base class for every failure raised by the package."""


class ConfigurationError(ErgodicError, ValueError):
    """Invalid experiment configuration, preset name or initial condition string."""


class NumericalError(ErgodicError):
    """A numerical phase failed (instability, singular system, broken scheme)."""


class MonotonicityError(NumericalError):
    """A stencil weight that must be nonnegative came out negative."""

    def __init__(self, message, node=None, term=None):
        super().__init__(message)
        self.node = node
        self.term = term


class SolverError(NumericalError):
    """Linear solve failed or the chain is numerically reducible."""


class InstabilityError(NumericalError):
    """Time marching produced a non-finite or exploding field.

    ``trajectory`` holds everything recorded up to the failing step.
    """

    def __init__(self, message, node=None, trajectory=None):
        super().__init__(message)
        self.node = node
        self.trajectory = trajectory
