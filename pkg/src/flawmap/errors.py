"""Exception types shared across the toolkit, mapped to CLI exit codes."""


class FlawmapError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class ConfigError(FlawmapError):
    """Bad usage, malformed configuration, or an invalid setup (exit 1)."""

    exit_code = 1


class ParameterError(ConfigError):
    """An operation was called with out-of-contract arguments."""


class DataError(FlawmapError):
    """Input data is missing, unreadable, or malformed (exit 2)."""

    exit_code = 2


class ValidationError(DataError):
    """Data violates a documented invariant."""


class CompatibilityError(DataError):
    """A stored artifact does not match the requested configuration."""


class TrainingError(FlawmapError):
    """Optimization failed at runtime (exit 3)."""

    exit_code = 3
