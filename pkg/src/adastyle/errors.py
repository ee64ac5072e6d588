"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent."""


class NumericError(ValueError):
    """Input contains NaN or inf."""


class ConfigError(ValueError):
    """Invalid configuration value. ``key`` names the offending field."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class IntegrityError(RuntimeError):
    """An attention map store is incomplete or inconsistent with the model."""


class HookError(RuntimeError):
    """A hook refers to a layer the denoiser does not have."""
