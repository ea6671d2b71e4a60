"""
Exceptions raised by dwvit.

The cli catches ``DwvitError`` and reports the message, everything else is a bug.
"""


class DwvitError(Exception):
    """Base class for all dwvit errors."""


class ConfigurationError(DwvitError, ValueError):
    """A configuration value or combination of values is invalid."""


class DimensionError(DwvitError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(DwvitError):
    """An operation was called outside its contract."""


class DegenerateStatisticsError(DwvitError):
    """Batch statistics cannot be computed from a single element."""


class FormatError(DwvitError):
    """A dataset file does not follow its binary format."""


class CheckpointError(DwvitError):
    """A checkpoint cannot be read or does not match the expected model."""


class NonFiniteLossError(DwvitError):
    """Training produced a NaN or infinite loss."""
