"""Exception hierarchy shared across the package."""


class RefilterError(Exception):
    """Base class for all package errors."""


class ConfigError(RefilterError):
    """Invalid configuration value or combination (CLI exit code 2)."""


class ParseError(RefilterError):
    """Malformed input file; message names the offending line."""


class VocabularyError(RefilterError):
    """Type vocabulary violation (duplicate, unknown or empty surface)."""


class CapacityError(RefilterError):
    """Assembled sequence cannot fit within the position budget."""


class MissingArtifactError(RefilterError):
    """A required upstream artifact does not exist (CLI exit code 3)."""

    def __init__(self, message: str, producer_stage: str | None = None):
        super().__init__(message)
        self.producer_stage = producer_stage


class NumericalError(RefilterError):
    """Non-finite loss, failed equivalence or gradient check (exit code 4)."""


class CheckpointError(RefilterError):
    """Corrupt or incompatible checkpoint file."""
