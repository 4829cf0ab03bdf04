"""Exception types shared across modules."""


class NumericError(ArithmeticError):
    """A forward/training computation produced NaN or Inf."""
