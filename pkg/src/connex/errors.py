"""Exception taxonomy shared across the package.

Validation problems (bad configs, bad input files) map to exit code 1 in the
CLI; numeric and contract failures map to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operator's rules."""


class NumericError(ArithmeticError):
    """A forward pass produced NaN or Inf."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class DataError(ValueError):
    """A dataset file or manifest failed validation."""


class ContractError(RuntimeError):
    """A caller violated an API contract (e.g. passed an unfrozen backbone)."""
