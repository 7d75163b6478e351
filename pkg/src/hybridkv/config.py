"""Model dimensions and the OPT presets used for byte and FLOP accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from hybridkv.errors import InputError


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int = 0
    vocab_size: int = 50272
    bytes_per_scalar: int = 2
    tokens_per_block: int = 16
    max_seq: int = 2048
    seed: int = 0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for attr in ("hidden_dim", "num_heads", "vocab_size", "bytes_per_scalar",
                     "tokens_per_block", "max_seq"):
            if getattr(self, attr) < 1:
                raise InputError(f"{attr} must be >= 1, got {getattr(self, attr)}")
        # zero layers is allowed for weight-byte accounting (embedding only)
        if self.num_layers < 0:
            raise InputError("num_layers must be >= 0")
        if self.hidden_dim % self.num_heads:
            raise InputError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_dim < self.hidden_dim:
            raise InputError("ffn_dim must be >= hidden_dim")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


# Dimensions from the public OPT config cards (num_hidden_layers, hidden_size,
# num_attention_heads, ffn_dim, vocab_size, max_position_embeddings).
PRESETS: dict[str, ModelConfig] = {
    "opt-6.7b": ModelConfig(32, 4096, 32, 16384, 50272, name="opt-6.7b"),
    "opt-13b": ModelConfig(40, 5120, 40, 20480, 50272, name="opt-13b"),
    "opt-30b": ModelConfig(48, 7168, 56, 28672, 50272, name="opt-30b"),
    "opt-66b": ModelConfig(64, 9216, 72, 36864, 50272, name="opt-66b"),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise InputError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None


_MODEL_KEYS = {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
               "bytes_per_scalar", "tokens_per_block", "max_seq", "seed", "name"}


def model_from_dict(doc: dict) -> ModelConfig:
    """Build a config from a JSON document; a ``preset`` key supplies defaults."""
    doc = dict(doc)
    base = preset(doc.pop("preset")) if "preset" in doc else None
    unknown = set(doc) - _MODEL_KEYS
    if unknown:
        raise InputError(f"unknown model config keys: {sorted(unknown)}")
    if base is not None:
        return replace(base, **doc)
    missing = {"num_layers", "hidden_dim", "num_heads"} - set(doc)
    if missing:
        raise InputError(f"model config missing {sorted(missing)}")
    return ModelConfig(**doc)


def load_model(path_or_name: str | Path) -> ModelConfig:
    """Accept either a preset name or a path to a JSON model document."""
    p = Path(path_or_name)
    if p.suffix == ".json" or p.exists():
        with open(p) as fh:
            return model_from_dict(json.load(fh))
    return preset(str(path_or_name))
