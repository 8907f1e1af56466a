"""Exception types shared across the package."""


class ParseError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ConsistencyError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class DegeneratePatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DatasetMissingError(FileNotFoundError):
    pass


class UnsupportedModeError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message, batch_ids=()):
        self.batch_ids = list(batch_ids)
        super().__init__(message)
