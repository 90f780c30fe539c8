"""Exception hierarchy. ``exit_code`` is the CLI contract for each family."""


class OdeLaplaceError(Exception):
    exit_code = 1


class InputError(OdeLaplaceError, ValueError):
    """Malformed input: dimensions, schemas, files, bounds."""

    exit_code = 2


class DomainError(InputError):
    """Point outside the prior support or the model's admissible set."""


class NumericalError(OdeLaplaceError, ArithmeticError):
    exit_code = 3


class IntegrationError(NumericalError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class FlowOverflowError(IntegrationError):
    def __init__(self, stage, time=None):
        super().__init__(f"non-finite value in RK4 stage K{stage}", time)
        self.stage = stage


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, pivot, message=None):
        super().__init__(message or f"matrix is not positive definite (Cholesky failed at pivot {pivot})")
        self.pivot = pivot


class MatrixSingularityError(NumericalError):
    pass


class ValidityError(NumericalError):
    """Covariance/correlation output failed a validity check."""


class BandError(NumericalError):
    pass


class ConvergenceError(OdeLaplaceError):
    exit_code = 4


class StalledOptimizationError(ConvergenceError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MixingError(ConvergenceError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConditioningWarning(UserWarning):
    """Sensitivity magnitudes large enough that accumulated error is likely."""
