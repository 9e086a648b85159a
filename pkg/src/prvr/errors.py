"""Exception types shared across the package.

The CLI maps these onto exit codes: ContractError/ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class PrvrError(Exception):
    """Base class for all package-specific errors."""


class ContractError(PrvrError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(PrvrError):
    """Invalid configuration value or unknown configuration key."""


class DataError(PrvrError):
    """Dataset integrity problem: missing labels, corrupt or truncated files."""


class NumericError(PrvrError):
    """Non-finite value or other numeric failure encountered."""
