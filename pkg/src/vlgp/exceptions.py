"""Exception hierarchy shared across the package."""


class VlgpError(Exception):
    """Base class for all package errors."""


class ValidationError(VlgpError):
    """Invalid inputs: bad shapes, bad configs, unreadable or mismatched files."""


class NumericalError(VlgpError):
    """Numerical failure during model computation."""


class NonFiniteUpdateError(NumericalError):
    """A Newton update produced NaN or Inf (diverging optimization)."""


class IndefiniteKernelError(NumericalError):
    """A pivot of the incomplete Cholesky went negative beyond tolerance."""
