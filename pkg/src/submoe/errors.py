"""Exception types shared across the package.

Each class doubles as a builtin exception category so callers that do not
care about the package-specific hierarchy can still catch the usual thing.
"""


class SubmoeError(Exception):
    """Base class for every package-specific error."""


class DimensionError(SubmoeError, ValueError):
    """Shapes or lengths do not line up."""


class NumericError(SubmoeError, ArithmeticError):
    """Non-finite values or numerically invalid inputs."""


class LabelError(SubmoeError, IndexError):
    """Label index outside the valid class range."""


class MissingRouterError(SubmoeError, KeyError):
    """No router registered for the requested task."""


class StateError(SubmoeError, RuntimeError):
    """Operation called out of order or against stale state."""


class DataError(SubmoeError, ValueError):
    """Invalid, empty, or unsatisfiable data request."""


class DomainError(SubmoeError, ValueError):
    """Quantity undefined for the given input (e.g. too few tasks)."""


class ConfigError(SubmoeError, ValueError):
    """Bad configuration value; the message carries the field path."""
