"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when shapes, dimensions or hyperparameters are inconsistent."""


class UsageError(RuntimeError):
    """Raised when an API is called in an invalid state (e.g. stepping a finished episode)."""


class ParseError(ValueError):
    """Raised when an input file does not follow the expected schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
