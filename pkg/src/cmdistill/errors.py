class CMDError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CMDError, ValueError):
    """Invalid hyperparameter, geometry or configuration file."""


class UsageError(CMDError, ValueError):
    """An operation was called outside its preconditions."""


class StateError(CMDError, RuntimeError):
    """Teacher/student state is inconsistent (mismatched names or shapes)."""


class FormatError(CMDError, ValueError):
    """A binary container could not be parsed."""
