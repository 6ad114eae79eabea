"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """An input violates a documented precondition (not a shape problem)."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but carries no usable signal (e.g. a single-class dataset)."""


class NumericError(ArithmeticError):
    """A computation cannot proceed reliably (ill-conditioning, divergence)."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward without a matching forward record)."""


class FormatError(ValueError):
    """A file or config does not match its documented layout."""


class ConfigError(FormatError):
    """An experiment config is malformed or contains unknown keys."""
