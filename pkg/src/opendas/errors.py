"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class ShapeError(ValidationError):
    """Tensor or image dimensions do not match what an operation expects."""


class TruncationError(ValidationError):
    """A query tokenizes to more tokens than the text encoder's context."""
