class InputError(ValueError):
    """Bad argument: shape mismatch, out-of-range id, unknown kind."""


class CapacityError(RuntimeError):
    """A memory pool or budget cannot hold the requested allocation."""


class DegenerateInputError(InputError):
    """Data that admits no unique answer (e.g. regression on a single x)."""


class ConfigError(ValueError):
    """Inconsistent simulation or experiment configuration."""
