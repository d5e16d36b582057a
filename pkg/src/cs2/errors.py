"""Exception hierarchy shared by every pipeline stage.

The CLI maps each family onto a distinct process exit code, so library code
should raise the most specific class available.
"""


class Cs2Error(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ShapeError(Cs2Error, ValueError):
    """Operands have incompatible shapes."""

    exit_code = 3


class DataError(Cs2Error, ValueError):
    """Input data is missing, corrupt or out of range."""

    exit_code = 3


class MalformedHeaderError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class HURangeError(DataError):
    pass


class ConfigError(Cs2Error, ValueError):
    exit_code = 2


class CheckpointMismatchError(Cs2Error):
    """A checkpoint does not fit the configuration it is loaded against."""

    exit_code = 5


class DivergenceError(Cs2Error, ArithmeticError):
    """A loss or gradient became non-finite during optimization."""

    exit_code = 4

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
