"""Exception hierarchy shared by all volsr modules."""


class VolsrError(Exception):
    """Base class for toolkit errors."""


class ValidationError(VolsrError, ValueError):
    """Invalid argument, shape, or configuration."""


class DegenerateInputError(ValidationError):
    """Input has no usable variation (e.g. a constant volume)."""


class FormatError(VolsrError):
    """File does not follow the expected binary layout."""


class CorruptionError(FormatError):
    """Header and payload disagree."""


class ConsistencyError(VolsrError):
    """A numerical consistency check failed (e.g. imaginary residue)."""


class ShapeError(ValidationError):
    """Tensor shapes are incompatible for an operation."""


class DivergenceError(VolsrError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class LeakageError(VolsrError):
    """A checkpoint was trained on subjects that belong to the test split."""
