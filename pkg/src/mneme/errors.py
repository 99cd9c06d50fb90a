"""Exception hierarchy shared by every module."""


class MnemeError(Exception):
    """Base class for all package errors."""


class DimensionError(MnemeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MnemeError, RuntimeError):
    """An operation was called outside its contract (wrong variant, non-scalar loss, ...)."""


class StateError(MnemeError, RuntimeError):
    """Required state (e.g. entity memory) is missing."""


class InputError(MnemeError, ValueError):
    """Malformed or out-of-range user input."""


class FormatError(MnemeError, ValueError):
    """A serialized file could not be decoded."""


class SpecError(MnemeError, ValueError):
    """A synthetic-corpus specification is infeasible."""


class NumericError(MnemeError, FloatingPointError):
    """A forward value became NaN or infinite."""
