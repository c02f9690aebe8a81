"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError/DataError -> 1,
NumericalError -> 3 (usage errors from argparse stay at 2).
"""


class ConfigurationError(ValueError):
    """A config value, shape, or key is invalid."""


class DataError(ValueError):
    """Dataset files are missing, malformed, or inconsistent."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (divergence, NaN)."""
