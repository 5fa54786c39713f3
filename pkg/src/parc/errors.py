"""Exception hierarchy shared across the package."""


class ParcError(Exception):
    """Base class for all package errors."""


class ShapeError(ParcError, ValueError):
    """Grid or tensor shapes do not agree."""


class ValidationError(ParcError, ValueError):
    """An input violates a documented precondition."""


class NonFiniteError(ParcError, FloatingPointError):
    """A NaN or Inf appeared in a field or tensor."""


class SolverError(ParcError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class StageError(ParcError, RuntimeError):
    """A training-stage contract was violated (missing checkpoint, unfrozen weights)."""


class ConfigError(ValidationError):
    """Unknown or malformed configuration key."""


class FormatError(ParcError, ValueError):
    """Base class for on-disk format errors."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(ShapeError):
    """Ingested raster dimensions disagree with the declared layout."""
