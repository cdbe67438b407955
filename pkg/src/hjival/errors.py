"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Bad configuration: unknown case id, invalid schema, malformed overrides."""


class NumericalError(RuntimeError):
    """Non-finite intermediate or failed numerical procedure."""


class ArtifactError(RuntimeError):
    """Missing, corrupt, or incompatible persisted artifact."""
