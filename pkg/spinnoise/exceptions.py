class SpinNoiseError(Exception):
    """Base class for errors raised by spinnoise."""


class InvalidInputError(SpinNoiseError, ValueError):
    """An argument or data set was rejected before any computation ran."""


class ConfigError(InvalidInputError):
    """A run configuration violated the schema."""


class IntegrationError(SpinNoiseError):
    """Nonlinear evolution left the space of density matrices."""


class EigenSolverError(SpinNoiseError):
    """Dense eigendecomposition failed."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class FitError(SpinNoiseError):
    """A fit problem was inconsistent (grids, masks, templates)."""
