"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shapes, ranges, ...)."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(RuntimeError):
    """Malformed or missing dataset files."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated or foreign checkpoint file."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient.

    ``params`` holds the last parameters that produced a finite epoch, and
    ``history`` the loss records up to that point.
    """

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history if history is not None else []
