"""Exception hierarchy shared across the package.

Exit-code contract for the CLI: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class SimbaError(Exception):
    """Base class for all package errors."""


class ConfigError(SimbaError):
    """Invalid configuration value or unparsable configuration file."""


class DataError(SimbaError):
    """Malformed, inconsistent, or non-finite input data."""


class NumericalError(SimbaError):
    """Numerical failure (decomposition breakdown, non-finite state)."""


class DecompositionError(NumericalError):
    """Low-rank kernel decomposition could not be completed."""
