"""Exception types raised across the package."""


class SplitSMCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SplitSMCError, ValueError):
    """An argument violates a documented precondition."""


class NumericalDegeneracyError(SplitSMCError, ArithmeticError):
    """A covariance (or a block of one) is not strictly positive definite."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class PolicyDegeneracyError(SplitSMCError):
    """A quadratic policy makes the twisted precision non positive definite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DomainError(SplitSMCError, ValueError):
    """A flow inverse was evaluated outside the image of the flow."""


class BranchSingularityError(SplitSMCError, ValueError):
    """Parameters sit exactly on a singular branch of a closed form."""


class UnsupportedSchemeError(SplitSMCError):
    """The requested scheme cannot be used with this model or regime."""


class ParticleCollapseError(SplitSMCError):
    """Every particle weight vanished at some step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EstimatorAbort(SplitSMCError):
    """An optimizer could not obtain a finite measurement."""
