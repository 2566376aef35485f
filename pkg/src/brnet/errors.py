"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its documented domain."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


class FormatError(ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IntegrityError(FormatError):
    """A stored checksum does not match the file contents."""


class ConfigError(ValueError):
    """Invalid experiment configuration.  ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
