"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific one that applies.
"""


class SplatSlamError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SplatSlamError):
    """Invalid or unknown configuration input (CLI exit code 2)."""


class DataError(SplatSlamError):
    """Missing, truncated, or malformed data files (CLI exit code 3)."""


class NumericalError(SplatSlamError):
    """Optimization or geometry failed to produce a usable result (CLI exit code 4)."""


class DomainError(SplatSlamError):
    """Query outside a trajectory's valid time interval."""
