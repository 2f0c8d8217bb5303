"""Exception hierarchy shared by the library and the command line."""


class SpecresError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpecresError, ValueError):
    """Tensor or image extents do not satisfy an operation's preconditions."""


class ConfigError(SpecresError, ValueError):
    """Invalid network, training, or run configuration."""


class DataFormatError(SpecresError, ValueError):
    """Malformed or truncated file, or a weight file for a different network."""


class NumericError(SpecresError, ArithmeticError):
    """Non-finite values or an ill-posed numerical problem."""


class DomainError(NumericError, ValueError):
    """Input outside the mathematical domain of a metric (e.g. zero denominator)."""


class SingularDesignError(NumericError):
    """Least-squares design matrix is rank deficient."""
