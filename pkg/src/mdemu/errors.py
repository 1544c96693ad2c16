"""Exception hierarchy shared by the library and the command line.

Each family carries the process exit code the CLI maps it to.
"""


class EmulatorError(Exception):
    exit_code = 1


class ConfigError(EmulatorError, ValueError):
    """Invalid configuration, shapes, or band limits."""

    exit_code = 2


class DimensionError(ConfigError):
    pass


class DomainError(ConfigError):
    """An index (month, diffusion step) outside its valid range."""


class DataError(EmulatorError, ValueError):
    """Input values violating a variable's physical constraints."""

    exit_code = 3


class StatsError(DataError):
    pass


class NumericError(EmulatorError, ArithmeticError):
    """Non-finite values or unstable optimisation."""

    exit_code = 4


class GradientExplosionError(NumericError):
    pass


class ContractViolation(EmulatorError, ValueError):
    pass
