"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class CardiosegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CardiosegError):
    """Invalid configuration value, file, or flag combination."""


class DataError(CardiosegError):
    """Problem with an input dataset or volume file."""


class VolumeFormatError(DataError):
    """Unknown format name or malformed file header."""


class VolumeShapeError(DataError):
    """Payload size inconsistent with the declared shape, or shape mismatch."""


class NumericError(CardiosegError):
    """Non-finite loss, failed gradient check, or similar numeric failure."""
