"""Exception types shared across the engine, with their CLI exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RESOURCE = 4


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent parameter combination."""


class FormatError(ValueError):
    """Malformed data file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ResourceBudgetError(RuntimeError):
    """Estimated memory for an operation exceeds the configured budget."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two rows."""


class TapeError(RuntimeError):
    """Autodiff tape misuse, e.g. backward called twice on one recording."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
