"""Exception hierarchy shared by every stage of the pipeline."""


class DsoError(Exception):
    """Base class for all package errors."""


class InputError(DsoError, ValueError):
    """Malformed or dimensionally inconsistent input."""


class NumericError(DsoError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class GeometryError(DsoError, ValueError):
    """Degenerate geometry (zero area, collinear points, empty cut)."""


class DecodeError(GeometryError):
    """A latent could not be decoded into a polygon."""


class ConfigError(DsoError, ValueError):
    """Invalid or unsatisfiable configuration."""


class CorruptionError(DsoError):
    """Persisted artifact failed its integrity check."""


class VersioningError(DsoError):
    """Persisted artifact has an unsupported format version."""
