"""Exception hierarchy shared across the package."""


class ParameterError(ValueError):
    """Invalid or mismatched ring / protocol parameters."""


class ProtocolError(RuntimeError):
    """A protocol step was invoked out of order or with inconsistent inputs."""


class RoundAborted(ProtocolError):
    """An aggregation round could not complete (too few decryptors, missing shares)."""

    def __init__(self, round_index: int, reason: str):
        super().__init__(f"round {round_index} aborted: {reason}")
        self.round_index = round_index
        self.reason = reason


class FramingError(ValueError):
    """Malformed envelope or payload bytes."""


class SecureChannelError(Exception):
    """Authentication failure or unknown recipient key on the relayed channel."""
