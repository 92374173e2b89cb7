"""Package-level error types."""


class NumericError(RuntimeError):
    """A computation produced non-finite or otherwise unusable numbers."""
