"""Shared exception types."""


class CapfuseError(Exception):
    """Base class for package-specific errors."""


class ShapeError(CapfuseError, ValueError):
    """Operand dimensions disagree."""


class ConfigError(CapfuseError, ValueError):
    """Invalid or mutually inconsistent configuration."""


class ParseError(CapfuseError, ValueError):
    """Malformed text input (embedding files, caption TSV)."""


class FormatError(CapfuseError, ValueError):
    """Malformed binary file (bad magic, truncated payload)."""


class UnsupportedVersionError(FormatError):
    """File written by an unknown format version."""


class CorruptionError(FormatError):
    """Checksum or shape validation failed on load."""


class ValidationError(CapfuseError, ValueError):
    """Dataset consistency check failed."""
