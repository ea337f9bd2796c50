"""Exception taxonomy shared by the library and the command-line tools.

Each error class carries the process exit code the CLI maps it to.
"""


class TraceError(Exception):
    """Base class for all tracegas errors."""

    exit_code = 1


class ConfigError(TraceError):
    """Bad configuration value, unknown key, or invalid command usage."""

    exit_code = 2


class DataError(TraceError):
    """Malformed dataset, label out of range, or refusal to clobber output."""

    exit_code = 3


class NumericError(TraceError):
    """NaN/invalid numerics detected (e.g. NaN loss abort, NaN softmax input)."""

    exit_code = 4


class IntegrityError(TraceError):
    """Checkpoint digest mismatch or truncated/garbled persistent state."""

    exit_code = 5


class ShapeError(TraceError):
    """Tensor shape contract violation (dimension mismatch, broadcast failure)."""


class GeometryError(ShapeError):
    """Spatial geometry violation (non-positive conv output, indivisible dims)."""
