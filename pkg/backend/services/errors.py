"""
Error types
Every failure raised by the MoNet services derives from MoNetError
"""

from typing import Optional, Tuple


class MoNetError(Exception):
    """Base class for all MoNet errors"""


class ShapeError(MoNetError, ValueError):
    """Array shapes disagree with what an operation expects"""


class NonFiniteError(MoNetError, ValueError):
    """NaN or Inf found where finite values are required"""


class InsufficientLocationsError(ShapeError):
    """Fewer locations than columns for the sub-matrix square root"""


class AsymmetricMatrixError(MoNetError, ValueError):
    """Symmetric input expected"""


class DegenerateSpectrumError(MoNetError, ValueError):
    """No singular value survives the retention threshold"""


class SvdConvergenceError(MoNetError, RuntimeError):
    """SVD did not converge or failed its reconstruction check"""

    def __init__(self, rows: int, cols: int, residual: float):
        self.rows = rows
        self.cols = cols
        self.residual = residual
        super().__init__(
            f"SVD of {rows}x{cols} matrix did not converge (relative residual {residual:.3e})"
        )


class SpectrumCollisionError(MoNetError, ArithmeticError):
    """Two retained squared singular values are too close for the K matrix"""

    def __init__(self, pair: Tuple[int, int], gap: float, guard: float):
        self.pair = pair
        self.gap = gap
        self.guard = guard
        super().__init__(
            f"singular values {pair[0]} and {pair[1]} collide: "
            f"|s_i^2 - s_j^2| = {gap:.3e} below separation guard {guard:.1e}"
        )


class StaleTapeError(MoNetError, RuntimeError):
    """A forward tape was reused or the parameters changed after it was recorded"""


class FeatureFileError(MoNetError, ValueError):
    """Malformed feature, dataset or model file"""

    def __init__(self, message: str, offset: int,
                 expected: Optional[int] = None, actual: Optional[int] = None):
        self.offset = offset
        self.expected = expected
        self.actual = actual
        detail = f"{message} (byte offset {offset}"
        if expected is not None:
            detail += f", expected {expected} bytes, got {actual}"
        super().__init__(detail + ")")


class ConfigError(MoNetError, ValueError):
    """Invalid run configuration"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class VerificationFailure(MoNetError):
    """A gradient check or oracle check failed its tolerance"""
