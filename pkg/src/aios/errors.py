"""Exception types shared across the package."""


class AiosError(Exception):
    pass


class InvalidParameterError(AiosError):
    """Non-finite or otherwise invalid model parameters."""


class ProjectionError(AiosError):
    """Point at or behind the camera plane."""


class DegenerateBoxError(AiosError):
    """Box with non-positive width or height."""


class AlignmentError(AiosError):
    """Rank-degenerate point configuration in Procrustes alignment."""


class SceneGenerationError(AiosError):
    """Scene generation exhausted its retry budget."""


class ConfigError(AiosError):
    """Unknown config key, bad value, or inconsistent configuration."""


class CheckpointError(AiosError):
    """Corrupt or incompatible checkpoint file."""


class StageError(AiosError):
    """Decoder stages invoked out of order or with a mismatched layout."""
