"""Exception hierarchy shared by every lgr module.

The CLI maps the three top-level categories (config / data / numeric) onto
distinct exit codes, so new errors should subclass one of them.
"""


class LgrError(Exception):
    """Base class for all lgr errors."""

    exit_code = 1


class ConfigError(LgrError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class ValidationError(ConfigError):
    """A structure (hierarchy, annotation, checkpoint) failed validation."""


class DataError(LgrError, RuntimeError):
    exit_code = 3


class NumericError(LgrError, ArithmeticError):
    exit_code = 4


class ContractError(LgrError, RuntimeError):
    """A call violated an ordering contract (e.g. backward twice on one tape)."""

    exit_code = 4
