"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid grid, option set or run configuration."""


class ContractError(ValueError):
    """An input violates an operation's precondition (e.g. unnormalized PSF)."""


class UnderdeterminedError(ValueError):
    """The requested reconstruction has fewer constraints than unknowns."""


class NumericalError(ArithmeticError):
    """NaN or divergence during an optimization run."""
