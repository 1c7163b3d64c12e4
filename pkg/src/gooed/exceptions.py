"""Exception types raised across the package."""


class GooedError(Exception):
    """Base class for package errors."""


class ConfigError(GooedError, ValueError):
    """Invalid model or run configuration."""


class DimensionMismatch(GooedError, ValueError):
    """Operands or input files disagree on sizes or index ranges."""


class DenseLimitError(GooedError, ValueError):
    """A dense code path was requested above its configured size limit."""


class NumericalError(GooedError, ArithmeticError):
    """Non-finite values or a failed factorization."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization broke down.

    ``minor`` is the 1-based order of the leading minor that is not
    positive definite, as reported by LAPACK.
    """

    def __init__(self, minor, message=None):
        self.minor = int(minor)
        if message is None:
            message = f"leading minor of order {self.minor} is not positive definite"
        super().__init__(message)
