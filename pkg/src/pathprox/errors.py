"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid architecture, optimizer or experiment configuration."""


class DegenerateInputError(ValueError):
    """Input has no well-defined result (e.g. normalizing a zero vector)."""


class FormatError(ValueError):
    """Malformed on-disk data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, iteration: int, records=None):
        super().__init__(message)
        self.iteration = iteration
        self.records = records if records is not None else []
