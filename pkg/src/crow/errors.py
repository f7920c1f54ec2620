"""Exception types raised across the package."""


class CrowError(Exception):
    """Base class for all package errors."""


class ShapeError(CrowError, ValueError):
    """Operand shapes are incompatible with an operation."""


class EmptyTensorError(CrowError, ValueError):
    pass


class EvaluationError(CrowError, ArithmeticError):
    """A probed function returned a non-finite value."""


class NonFiniteError(CrowError, FloatingPointError):
    """A forward intermediate or gradient became NaN/Inf."""


class SingularityError(CrowError, ZeroDivisionError):
    """An inverse would divide by a (numerically) zero scale."""


class DomainError(CrowError, ValueError):
    pass


class FormatError(CrowError, ValueError):
    """A container file could not be parsed."""


class TruncatedFileError(FormatError):
    def __init__(self, expected: int, available: int, what: str = "payload"):
        super().__init__(
            f"truncated file: {what} needs {expected} bytes, only {available} available"
        )
        self.expected = expected
        self.available = available


class IncompatibleFormatError(FormatError):
    """Magic bytes or format version do not match this reader."""


class TrainingDiverged(CrowError, RuntimeError):
    def __init__(self, message: str, step: int, checkpoint=None):
        super().__init__(message)
        self.step = step
        # path of the last good checkpoint file, or the in-memory model if none was written
        self.checkpoint = checkpoint


class InvertibilityError(CrowError, RuntimeError):
    pass
