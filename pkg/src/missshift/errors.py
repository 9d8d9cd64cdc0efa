"""Exception hierarchy shared by all modules."""


class MissShiftError(Exception):
    """Base class for library errors."""


class GraphError(MissShiftError):
    """Invalid autodiff graph construction (shape mismatch, bad operand)."""


class ContractError(MissShiftError):
    """A documented precondition was violated by the caller."""


class SingularMatrixError(MissShiftError):
    """A matrix that must be positive definite failed to factorize."""


class DivergenceError(MissShiftError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CalibrationError(MissShiftError):
    """A missingness mechanism could not be calibrated to the requested rate."""


class IngestionError(MissShiftError):
    """A covariate table could not be ingested."""


class FormatError(MissShiftError):
    """A persisted container is malformed or has an unsupported version."""


class UnavailableError(ContractError):
    """An estimator cannot be built for this scenario (e.g. no analytic form)."""
