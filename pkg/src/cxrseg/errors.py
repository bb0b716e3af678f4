"""Exception taxonomy shared across the package."""


class CxrsegError(Exception):
    """Base class for all package errors."""


class DimensionError(CxrsegError):
    """Shapes or spatial dimensions do not satisfy an operation's contract."""


class ConfigurationError(CxrsegError):
    """An invalid model, training, or pipeline configuration."""


class UsageError(CxrsegError):
    """An operation was called in a way its contract forbids."""


class StateError(CxrsegError):
    """A state-machine transition that the workflow graph does not allow."""


class ParseError(CxrsegError):
    """Malformed file content.

    `offset` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(CxrsegError):
    """Prediction/ground-truth id sets do not line up."""

    def __init__(self, message: str, missing_in_pred=(), missing_in_gt=()):
        self.missing_in_pred = tuple(missing_in_pred)
        self.missing_in_gt = tuple(missing_in_gt)
        detail = []
        if self.missing_in_pred:
            detail.append(f"missing in predictions: {list(self.missing_in_pred)}")
        if self.missing_in_gt:
            detail.append(f"missing in ground truth: {list(self.missing_in_gt)}")
        if detail:
            message = f"{message} ({'; '.join(detail)})"
        super().__init__(message)


class NoLungError(CxrsegError):
    """No lung pixels were detected; infection percentage is undefined."""
