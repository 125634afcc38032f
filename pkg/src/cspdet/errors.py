"""Exception types shared across the package.

Every error carries a short machine-parseable ``category`` so the CLI can
emit ``error:<category>: <message>`` lines and map them to exit codes.
"""


class CspdetError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ConfigError(CspdetError):
    """Invalid configuration value, layer parameter or graph wiring."""

    category = "config"


class DimensionError(ConfigError):
    """Tensor shapes incompatible with the requested operation."""

    category = "shape"


class DataError(CspdetError):
    """Malformed dataset files or annotations."""

    category = "data"


class CheckpointError(CspdetError):
    """Unreadable or shape-incompatible parameter checkpoint."""

    category = "checkpoint"
