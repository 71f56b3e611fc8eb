class GTNetError(Exception):
    """Base class for library errors."""


class ShapeError(GTNetError, ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(GTNetError, RuntimeError):
    """An API precondition was violated (e.g. backward on a consumed tape)."""


class ConstraintError(GTNetError, ValueError):
    """A structural parameter constraint does not hold (e.g. Tucker ranks)."""


class NumericError(GTNetError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(GTNetError, ValueError):
    """A serialized model file is malformed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationError(GTNetError, RuntimeError):
    """A synthetic scene could not be generated."""


class ConfigError(GTNetError, ValueError):
    """A configuration file is invalid."""
