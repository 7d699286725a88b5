"""Exception hierarchy shared by every module."""


class MergeForgeError(Exception):
    pass


class InvalidInput(MergeForgeError, ValueError):
    pass


class InvalidConfig(MergeForgeError, ValueError):
    pass


class FormatError(MergeForgeError):
    """Checkpoint file is not a well-formed NTC1 container."""


class CorruptFile(FormatError):
    """Container header is readable but payload bytes are missing or inconsistent."""


class IncompatibleCheckpoints(MergeForgeError):
    pass


class NumericalError(MergeForgeError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass


class UndefinedMetric(MergeForgeError, ValueError):
    pass


class NonFiniteInput(InvalidInput, NumericalError):
    """A matrix handed to a numerical routine holds NaN or Inf."""
