"""Exception types shared across the package."""


class TiltSegError(Exception):
    """Base class for all errors raised by tiltseg."""


class ShapeError(TiltSegError, ValueError):
    pass


class EmptyInputError(TiltSegError, ValueError):
    pass


class NonFiniteError(TiltSegError, ValueError):
    pass


class InvalidDistributionError(TiltSegError, ValueError):
    pass


class DegenerateClassError(TiltSegError, ValueError):
    pass


class FormatError(TiltSegError, ValueError):
    """Raised when an SSEG1 file cannot be parsed."""


class DivergenceError(TiltSegError, RuntimeError):
    """Raised when training produces a non-finite loss or gradient.

    ``trace`` holds the records produced before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
