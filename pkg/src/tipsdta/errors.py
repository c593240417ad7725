"""Exception types raised by tipsdta."""


class TipsdtaError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(TipsdtaError, ValueError):
    """An input does not satisfy the documented preconditions."""


class SingularMatrixError(TipsdtaError, ArithmeticError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateBasisError(TipsdtaError, ArithmeticError):
    """A basis matrix has nonpositive trace or its update broke down."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class WavFormatError(TipsdtaError, ValueError):
    """A WAV file is malformed or uses an unsupported encoding."""


class InputTooShortError(ContractViolation):
    """A signal is shorter than one analysis window."""


class InvalidCostError(TipsdtaError, ArithmeticError):
    """The cost became non-finite; ``trace`` holds the records so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
