"""Exception types shared across the package."""


class FlexiHorizonError(Exception):
    """Base class for package errors."""


class InvalidInputError(FlexiHorizonError, ValueError):
    pass


class ResourceError(FlexiHorizonError, RuntimeError):
    pass


class ConfigurationError(FlexiHorizonError, ValueError):
    pass


class ParseError(FlexiHorizonError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
