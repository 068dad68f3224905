class DimensionError(ValueError):
    """Array shapes do not chain."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence threshold."""


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    """A pipeline stage ran before the stage that produces its input."""
