class PglmmError(Exception):
    """Base class for every error raised by the solver."""

    pass


class InputError(PglmmError):
    """Raised when data, configuration or files are unusable as given."""

    pass


class NumericalError(PglmmError):
    """Raised when the optimization or sampling breaks down numerically."""

    pass


class ConstantColumn(InputError):
    """Raised when a covariate column has zero variance."""

    pass


class MissingColumn(InputError):
    """Raised when a required CSV column is absent."""

    pass


class InvalidResponse(InputError):
    """Raised when a response value is outside the family's support."""

    pass


class DimensionMismatch(InputError):
    """Raised when vectors, draws or matrices have incompatible shapes."""

    pass


class UnknownSeriesName(InputError):
    """Raised when a diagnostics filter names a group or variable that does not exist."""

    pass


class PosteriorFileError(InputError):
    """Raised when a persisted posterior file cannot be written or read."""

    pass


class InsufficientGroups(InputError):
    """Raised when fewer than two groups are available for variance estimation."""

    pass


class ConfigError(InputError):
    """Raised when a configuration value is out of range."""

    pass


class NonConvexThreshold(NumericalError):
    """Raised when a penalty scale makes the coordinate majorizer non-convex."""

    pass


class SamplerError(NumericalError):
    """Raised when the posterior log-density is not finite at the chain state."""

    pass


class MStepDivergence(NumericalError):
    """Raised when coefficients blow up during the M-step."""

    pass


class WorkingResidualError(NumericalError):
    """Raised when working residuals become non-finite."""

    pass
