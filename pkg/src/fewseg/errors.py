"""Exception hierarchy shared across the package.

Each top-level error class maps to a CLI exit code so shell callers can
distinguish configuration mistakes from data problems and checkpoint issues.
"""


class FewsegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(FewsegError):
    """Invalid configuration value, unknown dataset/fold, bad CLI arguments."""

    exit_code = 2


class DataError(FewsegError):
    """Dataset missing or malformed on disk."""

    exit_code = 3


class SamplingError(DataError):
    """Episode sampling exhausted the usable image pool."""


class DegenerateMaskError(DataError):
    """A mask lost all foreground (e.g. after downsampling to feature size)."""


class CheckpointError(FewsegError):
    """Checkpoint missing, unreadable, or incompatible with the config."""

    exit_code = 4


class ContractViolation(FewsegError):
    """An API was called outside its allowed phase (e.g. unlabeled at test time)."""
