"""Exception types shared across the package."""


class ALMError(Exception):
    """Base class for all package errors."""


class DimensionError(ALMError, ValueError):
    """Shapes do not line up."""


class DomainError(ALMError, ValueError):
    """A value lies outside the domain of a function (log of zero, ...)."""


class ContractError(ALMError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(ALMError, ArithmeticError):
    """NaN or Inf showed up where finite numbers are required."""


class EmptyBufferError(ALMError, LookupError):
    """The replay buffer holds no valid window of the requested length."""


class DegenerateInstanceError(ALMError, ValueError):
    """A normaliser vanished, so a distribution cannot be formed."""
