"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """An input violates a documented precondition of an operation."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinite values."""


class TrainingDivergence(NumericError):
    """Training produced a non-finite gradient or loss."""
