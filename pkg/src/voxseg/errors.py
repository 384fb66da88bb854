"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class GraphError(RuntimeError):
    """The recording tape was used outside its contract (non-scalar root,
    double backward without reset, mixed graphs, missing gradient...)."""


class ConfigError(ValueError):
    """A run configuration is invalid or references missing files."""


class HeaderError(ValueError):
    """A volume file header could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(ValueError):
    """Header metadata and raw payload disagree."""


class NumericError(RuntimeError):
    """Training produced a non-finite quantity; the message names the step."""
