"""Exception hierarchy shared across the engine."""


class RasrError(Exception):
    """Base class for all engine errors."""


class DataError(RasrError):
    """Schema, shape, or contract violation in data or checkpoints."""


class ConfigError(DataError):
    """Invalid configuration value."""


class BackendError(RasrError):
    """A reasoning/embedding backend failed after exhausting retries."""


class NumericsWarning(UserWarning):
    """Recoverable numerical degeneracy (e.g. cosine with a zero vector)."""
