"""Exception hierarchy; each family maps to a CLI exit code."""


class HutformerError(Exception):
    exit_code = 1


class ConfigError(HutformerError, ValueError):
    """Invalid configuration or argument combination."""

    exit_code = 2


class ShapeError(ConfigError):
    """Incompatible tensor shapes."""


class ContractError(ConfigError):
    """A caller broke an operation's precondition."""


class DataError(HutformerError):
    """Malformed, truncated or degenerate data."""

    exit_code = 3


class NumericError(HutformerError, ArithmeticError):
    """Non-finite values, empty reductions, failed gradient checks."""

    exit_code = 4
