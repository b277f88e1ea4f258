"""Exception types shared across the package."""


class TrackSSMError(Exception):
    """Base class for all package errors."""


class DimensionError(TrackSSMError, ValueError):
    """Tensor shapes are inconsistent."""


class DomainError(TrackSSMError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ConfigError(TrackSSMError, ValueError):
    """Invalid configuration value or unknown key."""


class TrainingError(TrackSSMError, RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class ParseError(TrackSSMError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.offset = offset


class IncompatibleCheckpoint(TrackSSMError, ValueError):
    """Checkpoint version or config does not match what the caller expects."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InputError(TrackSSMError, ValueError):
    """Input stream violates ordering or schema requirements."""
