"""Exception types. ``ValidationError`` marks bad user input (CLI exit code 1)."""


class CordsegError(Exception):
    pass


class ValidationError(CordsegError, ValueError):
    pass


class ShapeError(ValidationError):
    """Dimension/shape mismatch between operands."""


class NonFiniteError(CordsegError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
