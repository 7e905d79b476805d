"""Exception hierarchy shared across the package."""


class EvadeLabError(Exception):
    """Base class for all package errors."""


class ParameterError(EvadeLabError, ValueError):
    """An argument has the wrong shape, range or value."""


class UsageError(EvadeLabError, RuntimeError):
    """An API was called in a state where the call is meaningless."""


class TrainingError(EvadeLabError, RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class FormatError(EvadeLabError, ValueError):
    """A file does not match its declared binary layout."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class GameClosedError(UsageError):
    """Submission to an EV-CSA game that has already finished."""


class ConfigError(EvadeLabError, ValueError):
    """Malformed descriptor string or experiment configuration."""
