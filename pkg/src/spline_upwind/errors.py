"""Exception hierarchy shared by all modules."""


class SplineUpwindError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(SplineUpwindError, ValueError):
    """Invalid scalar parameter (degree, element count, radii, ...)."""


class DomainError(SplineUpwindError, ValueError):
    """Evaluation point outside the domain of a space or map."""


class GeometryError(SplineUpwindError):
    """Singular or orientation-reversing geometry map."""


class DataError(SplineUpwindError, ValueError):
    """Non-finite or otherwise unusable input data (e.g. forcing values)."""


class StabilizationError(SplineUpwindError):
    """A local tau/sigma system could not be solved reliably."""


class ConfigurationError(SplineUpwindError, ValueError):
    """Inconsistent combination of problem, method and options."""


class SolverError(SplineUpwindError):
    """Linear solve failed; carries a condition estimate when available."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition
