"""Exception hierarchy shared by every gagstream module."""


class GagError(Exception):
    """Base class for all errors raised by gagstream."""


class ConfigError(GagError, ValueError):
    """Invalid configuration value. ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CatalogError(GagError, IndexError):
    """An item or user id falls outside the model catalog."""


class ShapeError(GagError, ValueError):
    """Array dimensions do not line up."""


class ContractError(GagError, RuntimeError):
    """A caller broke an operation's precondition."""


class DataError(GagError, ValueError):
    """Malformed or empty input data."""


class NumericError(GagError, ArithmeticError):
    """NaN or Inf detected in parameters or gradients."""
