"""Exception hierarchy shared by the library and the command line."""


class NullHeadError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(NullHeadError, ValueError):
    exit_code = 2


class DataError(NullHeadError, ValueError):
    exit_code = 3


class NumericalError(NullHeadError, ArithmeticError):
    """Non-finite values or an iterative routine that failed to converge."""

    exit_code = 4


class ConvergenceError(NumericalError):
    pass


class DegenerateBatchError(NumericalError, ValueError):
    """A batch whose class structure cannot support the scatter computations."""


class DimensionError(NullHeadError, ValueError):
    exit_code = 4


class CheckpointError(DataError):
    pass
