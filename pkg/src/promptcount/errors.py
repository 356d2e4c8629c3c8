"""Exception hierarchy shared by every module."""


class PromptCountError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PromptCountError, ValueError):
    pass


class NumericalError(PromptCountError, FloatingPointError):
    pass


class ConfigError(PromptCountError, ValueError):
    pass


class DatasetError(PromptCountError, OSError):
    pass


class CheckpointError(PromptCountError):
    """Raised for unreadable, corrupt or incompatible checkpoint archives."""
