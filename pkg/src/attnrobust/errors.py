"""Exception types shared across the package."""


class AttnRobustError(Exception):
    """Base class for all package errors."""


class DimensionError(AttnRobustError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AttnRobustError, ValueError):
    """A numeric argument lies outside the valid domain."""


class ConfigError(AttnRobustError, ValueError):
    """A configuration is internally inconsistent."""


class ContractError(AttnRobustError, RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class DataError(AttnRobustError, ValueError):
    """Dataset contents are invalid (bad labels, wrong sizes)."""


class ParseError(DataError):
    """A binary dataset file is malformed.

    Attributes:
        offset: byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
