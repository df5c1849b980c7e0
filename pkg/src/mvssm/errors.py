"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class OpRegistrationError(TypeError):
    """A differentiable op was declared without a backward rule."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. only one class)."""


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class FormatError(ValueError):
    """A binary file does not match its declared layout."""
