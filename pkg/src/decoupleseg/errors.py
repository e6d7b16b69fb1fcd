class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""
