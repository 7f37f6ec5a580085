"""Exception types shared across the package."""


class DataError(Exception):
    """Input data is missing, inconsistent or malformed."""


class CheckpointError(Exception):
    """A checkpoint cannot be read or does not match the requested configuration."""


class ConfigError(ValueError):
    """A configuration file is malformed or holds unknown keys."""
