class CoelabError(Exception):
    """Base class for every error raised by coelab."""


class DimensionError(CoelabError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(CoelabError, ArithmeticError):
    """A NaN or non-finite value appeared where a finite one is required."""


class UsageError(CoelabError, ValueError):
    """An API was called outside its contract."""


class ConfigurationError(CoelabError, ValueError):
    """A configuration document or architecture setting is invalid."""


class DomainError(CoelabError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class CheckpointError(CoelabError, ValueError):
    """A checkpoint file is truncated, corrupt or inconsistent."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class RoutingInvariantError(CoelabError, AssertionError):
    """Expert routing broke a sparsity or compute-accounting invariant."""
