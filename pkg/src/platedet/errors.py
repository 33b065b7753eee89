"""Shared exception types.

The CLI maps these onto exit codes: configuration problems exit 2,
I/O problems exit 3 (plain OSError), contract violations exit 4.
"""


class DimensionError(ValueError):
    """Array shapes do not satisfy an operation's requirements."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, bad mode, ...)."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid or infeasible."""


class DataError(ValueError):
    """Inputs that should line up (records vs annotations) do not."""
