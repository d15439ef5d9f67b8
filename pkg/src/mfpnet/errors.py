"""Exception hierarchy shared by every module."""


class MFPError(Exception):
    """Base class for all library errors."""


class ShapeError(MFPError, ValueError):
    pass


class ConfigError(MFPError, ValueError):
    pass


class ContractError(MFPError, ValueError):
    """A caller violated an operation's precondition."""


class FormatError(MFPError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(MFPError, FloatingPointError):
    pass
