"""Exception hierarchy shared by every module in the package."""


class VaceError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VaceError, ValueError):
    """Shapes do not fit an operation."""

    def __init__(self, operation, message, shapes=()):
        self.operation = operation
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{operation}: {message}{detail}")


class ArgumentError(VaceError, ValueError):
    """An argument is outside its allowed domain."""


class MaskValueError(ArgumentError):
    """A mask contains values other than 0 and 1."""


class ConfigError(VaceError, ValueError):
    """Invalid or unknown configuration."""


class ContractError(VaceError):
    """A caller broke a function contract (e.g. non-scalar output in a gradient check)."""


class ContainerParseError(VaceError):
    """Malformed dataset or video container."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte offset {offset}: {message}")


class CheckpointError(VaceError):
    """A checkpoint could not be written or read."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""
