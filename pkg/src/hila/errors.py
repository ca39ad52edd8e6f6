"""Exception types shared across the package."""


class HilaError(Exception):
    """Base class for all package errors."""


class ShapeError(HilaError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class GeometryError(HilaError, ValueError):
    """A patch geometry does not tile the given spatial extent."""


class ContractError(HilaError, ValueError):
    """An operation was called outside its documented contract."""


class ConfigError(HilaError, ValueError):
    """A model or dataset configuration failed validation."""


class DataError(HilaError, ValueError):
    """Input data (labels, predictions) violates its value contract."""


class ParseError(HilaError, ValueError):
    """A binary or text file could not be parsed.

    Carries ``offset``, the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(HilaError, RuntimeError):
    """Training aborted because the loss became non-finite."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
