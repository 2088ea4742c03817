"""Exception types shared across modules."""


class ContractViolation(ValueError):
    """An input broke an ordering, shape or alignment precondition."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class CorruptStreamError(ValueError):
    """A bitstream failed validation while decoding."""


class StreamUnderflowError(CorruptStreamError):
    """The decoder ran past the end of the coded bytes."""


class ModelMismatchError(ValueError):
    """Bitstream, config and checkpoint disagree."""
