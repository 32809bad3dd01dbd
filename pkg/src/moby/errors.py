"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class ContractError(RuntimeError):
    """A runtime precondition of an operation was violated."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared during computation.

    ``op`` names the first operation that produced it, when known.
    """

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class FormatError(ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
