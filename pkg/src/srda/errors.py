"""Exception hierarchy shared by every srda module."""


class SrdaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(SrdaError, ValueError):
    pass


class ShapeError(SrdaError, ValueError):
    pass


class ZeroNorm(SrdaError, ArithmeticError):
    pass


class DivergedError(SrdaError, ArithmeticError):
    """A loss or gradient became non-finite.

    ``step`` carries the global step index when the error is raised from the
    training loop, otherwise it is ``None``.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InvalidLabel(SrdaError, ValueError):
    pass


class FlatGradient(SrdaError, ArithmeticError):
    """The probe gradient vanished, so no direction can be derived from it."""


class InternalError(SrdaError, RuntimeError):
    pass


class NonPlanarData(SrdaError, ValueError):
    pass


class BadMagic(SrdaError, ValueError):
    pass


class TruncatedPayload(SrdaError, ValueError):
    pass


class UnsupportedType(SrdaError, ValueError):
    pass


class InvalidCount(SrdaError, ValueError):
    pass


class UnlabeledData(SrdaError, ValueError):
    pass


class InsufficientData(SrdaError, ValueError):
    pass


class ConfigError(SrdaError, ValueError):
    """Bad run configuration; ``line`` is the 1-based source line if known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(SrdaError, ValueError):
    pass
