"""Exception hierarchy shared across the package."""


class VitslimError(Exception):
    """Base class for all domain errors; CLI maps these to exit code 1."""


class ShapeError(VitslimError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class GradientError(VitslimError, RuntimeError):
    """Misuse of the reverse-mode tape (non-scalar loss, double backward, ...)."""


class NumericsError(VitslimError, ArithmeticError):
    """NaN/Inf produced from finite inputs, or division by zero."""


class SpecError(VitslimError, ValueError):
    """Invalid architecture description or schema violation."""


class TableError(VitslimError, ValueError):
    """Latency table construction/lookup failure."""
