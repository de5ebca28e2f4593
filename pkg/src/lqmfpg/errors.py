"""Exception hierarchy shared by all lqmfpg modules."""


class LqmfpgError(Exception):
    """Base class for every error raised by this package."""


class ModelValidationError(LqmfpgError, ValueError):
    """Model or population data violates a hard structural requirement."""


class AdmissibilityError(LqmfpgError, ValueError):
    """A feedback lies outside the set where the discounted cost is finite."""


class NumericsError(LqmfpgError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StepError(LqmfpgError, RuntimeError):
    """An optimizer step could not be made admissible.

    ``trace`` holds everything recorded before the failure so callers can
    still flush partial results.
    """

    def __init__(self, message, iteration, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class ConfigError(LqmfpgError, ValueError):
    """Malformed or inconsistent experiment configuration."""
