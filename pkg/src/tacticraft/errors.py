"""Shared exception types."""


class TacticraftError(Exception):
    """Base class for all package errors."""


class DimensionError(TacticraftError):
    """Tensor shapes are incompatible for the requested operation."""


class NonFiniteError(TacticraftError):
    """A NaN or Inf appeared where only finite values are allowed."""


class InvalidMaskError(TacticraftError):
    """A mask leaves no valid entry to normalize over."""


class ValidationError(TacticraftError):
    """A domain value violates its invariants."""


class BuildOrderParseError(TacticraftError):
    """A build-order line could not be parsed."""

    def __init__(self, message, line_no=None, col=None):
        loc = ""
        if line_no is not None:
            loc = f" (line {line_no}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(message + loc)
        self.line_no = line_no
        self.col = col


class OrderingError(TacticraftError):
    """Build-order entries violate the monotonic-time invariant."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"{message} (line {line_no})"
        super().__init__(message)
        self.line_no = line_no


class EndpointError(TacticraftError):
    """The classifier endpoint failed after exhausting retries."""

    def __init__(self, message, replay_id=None):
        if replay_id is not None:
            message = f"{message} [replay_id={replay_id}]"
        super().__init__(message)
        self.replay_id = replay_id


class ProtocolError(TacticraftError):
    """The classifier endpoint returned a response we cannot interpret."""

    def __init__(self, message, replay_id=None):
        if replay_id is not None:
            message = f"{message} [replay_id={replay_id}]"
        super().__init__(message)
        self.replay_id = replay_id


class ConfigError(TacticraftError):
    """A config file or preset is malformed."""


class CheckpointError(TacticraftError):
    """A checkpoint manifest or blob is unreadable or inconsistent."""


class TrainAbortError(TacticraftError):
    """Training hit a non-recoverable numeric failure."""

    def __init__(self, message, last_checkpoint=None):
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
