"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and argument
problems exit 2, missing or inconsistent data exits 3, and numeric
failures (divergence, non-finite state) exit 4.
"""


class SohcastError(Exception):
    """Base class for all package errors."""


class ParameterError(SohcastError, ValueError):
    """A function argument or configuration value violates its contract."""


class ConfigError(ParameterError):
    """A config file could not be parsed or validated."""


class DataError(SohcastError):
    """Required data is missing, empty, or structurally inconsistent."""


class NumericError(SohcastError):
    """A computation produced non-finite values or diverged."""


class DegradationFloorError(SohcastError):
    """An electrode active-material fraction was driven to zero or below."""
