"""Exception types shared across the package."""


class MsDistillError(Exception):
    """Base class for all package errors."""


class ValidationError(MsDistillError, ValueError):
    """Input violates a documented precondition (counts, channels, ranges)."""


class FormatError(MsDistillError):
    """A file does not match its binary container format."""


class ShapeError(MsDistillError, ValueError):
    """Tensor shapes are incompatible for the requested primitive."""


class ContractError(MsDistillError):
    """A call breaks an operation contract (non-scalar loss, empty pairing, ...)."""


class NotSPDError(MsDistillError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} has value {value!r}")
        self.pivot = pivot
        self.value = value


class NumericalAbort(MsDistillError):
    """Training produced a non-finite loss; ``dump_path`` holds the diagnostic record."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
