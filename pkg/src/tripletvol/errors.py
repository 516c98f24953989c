"""Exception taxonomy shared across the package."""


class TripletVolError(Exception):
    """Base class for all package errors."""


class ShapeError(TripletVolError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(TripletVolError, ValueError):
    """A documented precondition was violated by the caller."""


class GradientError(TripletVolError, RuntimeError):
    """Backward pass could not produce the requested gradients."""


class OracleError(TripletVolError, ArithmeticError):
    """The finite-difference oracle hit a non-finite function value."""


class NumericError(TripletVolError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class FormatError(TripletVolError, ValueError):
    """A file on disk does not match its declared binary or JSON layout."""


class ConfigError(TripletVolError, ValueError):
    """A configuration object is internally inconsistent."""


class DataError(TripletVolError, ValueError):
    """Dataset contents cannot satisfy the requested operation."""
