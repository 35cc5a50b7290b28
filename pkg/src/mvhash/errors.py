"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation/config problems
exit 2, numerical aborts at runtime exit 3.
"""


class MvhashError(Exception):
    """Base class for all package errors."""


class ShapeError(MvhashError):
    """Operands have incompatible shapes."""


class ValidationError(MvhashError):
    """Input data or file contents violate a documented invariant."""


class ConfigError(ValidationError):
    """A configuration value is out of its allowed domain."""


class FormatError(ValidationError):
    """A binary file is corrupt, truncated, or has the wrong version."""


class DegenerateRowError(MvhashError):
    """A row that must have nonzero norm is numerically zero."""


class NumericalAbort(MvhashError):
    """Training produced a non-finite loss and was stopped."""
