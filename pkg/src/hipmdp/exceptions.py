"""Exception types shared across the package."""


class NumericalFailure(ArithmeticError):
    """Raised when a computation produces non-finite values or a factorization fails."""


class IllegalStateError(RuntimeError):
    """Raised when an object is used before it is ready (empty buffer, unfitted model)."""
