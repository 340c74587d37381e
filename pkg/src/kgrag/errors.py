"""Exception hierarchy shared across the package."""


class KgragError(Exception):
    """Base class for all package errors."""


class ParseError(KgragError):
    """A data file could not be parsed; message carries line/record context."""


class ConfigError(KgragError):
    """Invalid or inconsistent pipeline configuration."""


class PrerequisiteError(KgragError):
    """A pipeline stage was invoked before the artifacts it consumes exist."""


class FingerprintError(KgragError):
    """A persisted artifact was produced under an incompatible configuration."""


class StoreFormatError(KgragError):
    """An embedding-store or parameter file is corrupt or has a bad header."""


class EncoderError(KgragError):
    """The embedding endpoint failed after the configured retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class LlmError(KgragError):
    """The chat-completion endpoint failed after the configured retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class LlmTimeoutError(LlmError):
    """The chat-completion request timed out."""


class TrainingError(KgragError):
    """Training aborted (e.g. the loss became non-finite)."""


class GenerationError(KgragError):
    """Synthetic KG generation could not satisfy its constraints."""
