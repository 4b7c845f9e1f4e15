"""Exception types shared across the package."""


class AhocdaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(AhocdaError, ValueError):
    """Input data is malformed (bad shape, non-finite values, label range)."""


class ParameterError(AhocdaError, ValueError):
    """A scalar or configuration parameter is outside its valid range."""


class StateError(AhocdaError, RuntimeError):
    """An object is used before it has been put in the required state."""


class NumericError(AhocdaError, ArithmeticError):
    """A computation produced non-finite values (e.g. a diverging loss)."""
