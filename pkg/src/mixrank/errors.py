"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are inconsistent for the requested operation."""


class ContractError(RuntimeError):
    """An internal precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or hit a degenerate value (zero norm)."""


class CapacityError(RuntimeError):
    """KV pool cannot satisfy an allocation."""

    def __init__(self, message: str, required_pages: int, free_pages: int):
        super().__init__(message)
        self.required_pages = required_pages
        self.free_pages = free_pages


class DecodeError(ValueError):
    """A wire payload or frame failed validation; `field` names the bad part."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class TrainingError(RuntimeError):
    """Training diverged or received non-finite gradients."""
