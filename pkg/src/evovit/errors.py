"""Exception types shared across the library.

The CLI maps these onto stable exit codes: configuration/format problems
exit 2, numeric failures exit 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class FormatError(ValueError):
    """A binary file does not match its expected format."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class StateError(RuntimeError):
    """An operation was called before its prerequisite state existed."""
