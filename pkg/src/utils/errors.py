"""Exception hierarchy shared by every detnet module.

The CLI in main.py maps these onto exit codes, so raise the most specific one.
"""


class DetNetError(Exception):
    """Base class for all detnet errors."""


class ConfigError(DetNetError, ValueError):
    """A configuration value violates its documented range or invariant."""


class ShapeError(DetNetError, ValueError):
    """Tensor extents are inconsistent with an operation or a layer spec."""


class DatasetError(DetNetError):
    """A dataset directory, annotation file or frame is missing or malformed."""


class CheckpointError(DetNetError):
    """A checkpoint file is corrupted or does not match the requested model."""


class NumericError(DetNetError):
    """Non-finite values or a failed numerical check."""
