"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class ValidationError(ValueError):
    """Input is well-formed but violates a domain rule."""


class BoundsError(IndexError):
    """Index outside the valid range."""


class NumericalError(ArithmeticError):
    """A non-finite value was produced or supplied."""
