"""Exception types shared across the toolkit."""


class VstainError(Exception):
    """Base class for all toolkit-specific errors."""


class FileFormatError(VstainError):
    """A file does not conform to its declared format (bad magic, header, ...)."""


class TruncatedFileError(FileFormatError):
    """A file ended before its declared payload was complete."""


class DimensionOverflowError(FileFormatError):
    """Declared image/tensor dimensions exceed sane bounds."""


class ManifestError(VstainError):
    """A dataset manifest is malformed. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(VstainError):
    """Invalid command-line or config-file options."""


class TrainingDivergedError(VstainError):
    """Training produced a non-finite loss."""
