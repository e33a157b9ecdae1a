class LabError(Exception):
    """Base class for every failure raised by the lab."""


class ConfigError(LabError, ValueError):
    """Raised when a run config is malformed, incomplete or names missing files."""
