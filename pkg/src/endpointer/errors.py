"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Raised when a config object violates its invariants (e.g. min > max)."""


class FormatError(ValueError):
    """Raised on malformed binary files; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(ValueError):
    """Raised on malformed or out-of-contract wire messages."""


class NonFiniteGradientError(RuntimeError):
    """Raised when backpropagation produces NaN/Inf; aborts the epoch."""
