"""Shared exception types.

Every failure mode raised on purpose by this package goes through one of
these classes so callers (and the CLI) can tell a shape bug from a bad
config file from a corrupt dataset.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class ConfigurationError(ValueError):
    """A config value or option violates a documented constraint."""


class DataError(ValueError):
    """Runtime data is out of contract (labels out of range, empty split, ...)."""


class FormatError(ValueError):
    """A serialized file does not match its binary layout; names the offset."""


class OracleError(RuntimeError):
    """A verification routine could not produce a trustworthy reference value."""


class NumericsError(RuntimeError):
    """Training hit a non-finite loss or gradient; the message says where."""
