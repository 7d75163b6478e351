"""Planner and simulator for KV/activation hybrid caching in host-offloaded LLM inference."""

__version__ = "0.1.0"

from hybridkv.errors import CapacityError, ConfigError, DegenerateInputError, InputError

__all__ = [
    "CapacityError",
    "ConfigError",
    "DegenerateInputError",
    "InputError",
    "__version__",
]
