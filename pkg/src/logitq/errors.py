"""Exception types shared across the toolkit."""


class LogitqError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LogitqError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(LogitqError):
    """A caller violated an operation's precondition."""


class NumericError(LogitqError):
    """A computation produced or received non-finite / degenerate values."""


class StateError(LogitqError):
    """An operation was requested in an invalid object state."""


class FormatError(LogitqError):
    """A serialized artifact (checkpoint, packed file, cache) is malformed."""
