from typing import Optional


class PatchNerfError(Exception):
    """Base class for all toolkit errors."""

    pass


class ContractViolation(PatchNerfError, ValueError):
    """Raised when a caller breaks an operation's precondition."""

    pass


class InputError(PatchNerfError, ValueError):
    """Raised for malformed input data (wrong shapes, empty rasters)."""

    pass


class ConfigError(PatchNerfError):
    """Raised for invalid, unknown or unparsable configuration."""

    def __init__(
        self,
        message: str,
        source: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.source = source
        self.line = line
        self.column = column
        if source is not None and line is not None:
            message = f"{source}:{line}:{column}: {message}"
        super().__init__(message)


class CheckpointFormatError(PatchNerfError):
    """Raised when a binary checkpoint or density grid fails validation."""

    pass


class TrainingDivergedError(PatchNerfError, RuntimeError):
    """Raised when the optimization produces a non-finite loss."""

    pass
