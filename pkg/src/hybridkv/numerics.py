"""Toy-scale decoder numerics in double precision.

The decoder follows the bare equations: embedding plus positional lookup,
QKV generation, multi-head attention, projection and a two-matrix FFN with a
ReLU in between.  There is no layer norm and no residual path.  The point of
this module is to show that a layer's K,V rebuilt from its saved input
activation (``recompute_kv_from_activation``) or from the token ids
(``token_recompute_kv``) are the same numbers a KV cache would have stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hybridkv.config import ModelConfig
from hybridkv.errors import InputError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(state: np.ndarray) -> np.ndarray:
    z = state + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def seeded_uniform(seed: int, stream: int, shape, low=-0.1, high=0.1) -> np.ndarray:
    """Deterministic uniform draws from a splitmix64 counter stream.

    ``stream`` separates tensors drawn from the same seed.
    """
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        key = _splitmix64(key ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF))
        counters = key + np.arange(n, dtype=np.uint64) * _GOLDEN
        bits = _splitmix64(counters)
    unit = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (low + (high - low) * unit).reshape(shape)


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_proj: np.ndarray
    w_ffn1: np.ndarray
    w_ffn2: np.ndarray


@dataclass(frozen=True)
class DecoderWeights:
    config: ModelConfig
    embedding: np.ndarray
    positional: np.ndarray
    layers: tuple[LayerWeights, ...]

    @classmethod
    def generate(cls, config: ModelConfig, seed: int | None = None) -> "DecoderWeights":
        seed = config.seed if seed is None else seed
        d, f = config.hidden_dim, config.ffn_dim
        stream = iter(range(1, 10 ** 9))

        def draw(*shape):
            return seeded_uniform(seed, next(stream), shape)

        emb = draw(config.vocab_size, d)
        pos = draw(config.max_seq, d)
        layers = tuple(
            LayerWeights(draw(d, d), draw(d, d), draw(d, d), draw(d, d), draw(d, f), draw(f, d))
            for _ in range(config.num_layers)
        )
        return cls(config, emb, pos, layers)

    def replace_layer(self, index: int, **arrays) -> "DecoderWeights":
        from dataclasses import replace

        layers = list(self.layers)
        layers[index] = replace(layers[index], **arrays)
        return DecoderWeights(self.config, self.embedding, self.positional, tuple(layers))


@dataclass(frozen=True)
class KvPair:
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.k.shape != self.v.shape:
            raise InputError(f"K {self.k.shape} and V {self.v.shape} differ")

    def __len__(self):
        return self.k.shape[0]

    def rows(self, start: int, stop: int) -> "KvPair":
        return KvPair(self.k[start:stop], self.v[start:stop])

    @staticmethod
    def concat(parts: Sequence["KvPair"]) -> "KvPair":
        return KvPair(np.concatenate([p.k for p in parts]), np.concatenate([p.v for p in parts]))


def _check_cols(a: np.ndarray, d: int, what: str):
    if a.ndim != 2 or a.shape[1] != d:
        raise InputError(f"{what}: expected (*, {d}) matrix, got shape {a.shape}")


def _layer(weights: DecoderWeights, layer: int) -> LayerWeights:
    if not 0 <= layer < len(weights.layers):
        raise InputError(f"layer {layer} out of range [0, {len(weights.layers)})")
    return weights.layers[layer]


def embed(token_ids: Sequence[int], weights: DecoderWeights, start_pos: int = 0) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    cfg = weights.config
    if ids.ndim != 1:
        raise InputError("token_ids must be a 1-D sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.embedding.shape[0]):
        raise InputError(f"token id out of range [0, {weights.embedding.shape[0]})")
    if start_pos + ids.size > weights.positional.shape[0]:
        raise InputError(f"sequence exceeds max_seq={cfg.max_seq}")
    positions = np.arange(start_pos, start_pos + ids.size)
    return weights.embedding[ids] + weights.positional[positions]


def qkv_generate(a: np.ndarray, layer: int, weights: DecoderWeights):
    lw = _layer(weights, layer)
    _check_cols(a, weights.config.hidden_dim, "qkv_generate")
    return a @ lw.w_q, a @ lw.w_k, a @ lw.w_v


def attention_step(q_new: np.ndarray, kv: KvPair, num_heads: int, scale: bool = True) -> np.ndarray:
    """One query row against a context; returns a 1 x d row."""
    q = np.atleast_2d(q_new)
    if q.shape[0] != 1:
        raise InputError("attention_step takes a single query row")
    if len(kv) == 0:
        raise InputError("attention over an empty context")
    d = q.shape[1]
    if kv.k.shape[1] != d:
        raise InputError(f"query width {d} != key width {kv.k.shape[1]}")
    if d % num_heads:
        raise InputError(f"d={d} not divisible by num_heads={num_heads}")
    hd = d // num_heads
    out = np.empty((1, d))
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = kv.k[:, sl] @ q[0, sl]
        if scale:
            logits = logits / np.sqrt(hd)
        logits = logits - logits.max()
        p = np.exp(logits)
        p /= p.sum()
        out[0, sl] = p @ kv.v[:, sl]
    return out


def causal_attention(q: np.ndarray, kv: KvPair, num_heads: int, scale: bool = True) -> np.ndarray:
    """Row t of ``q`` attends to context rows 0..t (the prefill pattern)."""
    return np.concatenate(
        [attention_step(q[t], kv.rows(0, t + 1), num_heads, scale) for t in range(q.shape[0])]
    ) if q.shape[0] else np.zeros((0, q.shape[1]))


def project_ffn(att: np.ndarray, layer: int, weights: DecoderWeights) -> np.ndarray:
    lw = _layer(weights, layer)
    _check_cols(att, weights.config.hidden_dim, "project_ffn")
    proj = att @ lw.w_proj
    return np.maximum(proj @ lw.w_ffn1, 0.0) @ lw.w_ffn2


def recompute_kv_from_activation(a_c: np.ndarray, layer: int, weights: DecoderWeights) -> KvPair:
    lw = _layer(weights, layer)
    _check_cols(a_c, weights.config.hidden_dim, "recompute_kv_from_activation")
    # same expressions as qkv_generate so the result is bit-identical
    return KvPair(a_c @ lw.w_k, a_c @ lw.w_v)


@dataclass
class ForwardTrace:
    """Per-layer inputs and K,V captured from a full causal forward pass."""

    inputs: list[np.ndarray]   # A^i for every layer, tokens x d
    kv: list[KvPair]
    output: np.ndarray         # A^{num_layers}


def forward(token_ids: Sequence[int], weights: DecoderWeights, num_layers: int | None = None,
            scale: bool = True) -> ForwardTrace:
    cfg = weights.config
    n_layers = cfg.num_layers if num_layers is None else num_layers
    a = embed(token_ids, weights)
    inputs, kvs = [], []
    for i in range(n_layers):
        inputs.append(a)
        q, k, v = qkv_generate(a, i, weights)
        kv = KvPair(k, v)
        kvs.append(kv)
        a = project_ffn(causal_attention(q, kv, cfg.num_heads, scale), i, weights)
    return ForwardTrace(inputs, kvs, a)


def token_recompute_kv(token_ids: Sequence[int], weights: DecoderWeights, target_layer: int,
                       scale: bool = True) -> KvPair:
    """Rebuild layer ``target_layer`` K,V from raw token ids by re-running every earlier layer."""
    if not 0 <= target_layer < weights.config.num_layers:
        raise InputError(f"target layer {target_layer} out of range")
    trace = forward(token_ids, weights, num_layers=target_layer, scale=scale)
    _, k, v = qkv_generate(trace.output, target_layer, weights)
    return KvPair(k, v)


@dataclass
class StepResult:
    output: np.ndarray          # 1 x d activation leaving the last layer
    inputs: list[np.ndarray]    # new-token input activation per layer (checkpoint candidates)
    new_kv: list[KvPair]        # new-token K,V per layer


def decode_step(token_id: int, position: int, context: Sequence[KvPair], weights: DecoderWeights,
                scale: bool = True) -> StepResult:
    """Generate one token given per-layer context K,V for positions 0..position-1."""
    cfg = weights.config
    if len(context) != cfg.num_layers:
        raise InputError(f"need context for {cfg.num_layers} layers, got {len(context)}")
    a = embed([token_id], weights, start_pos=position)
    inputs, new_kv = [], []
    for i in range(cfg.num_layers):
        inputs.append(a)
        q, k, v = qkv_generate(a, i, weights)
        new_kv.append(KvPair(k, v))
        full = KvPair.concat([context[i], KvPair(k, v)])
        a = project_ffn(attention_step(q, full, cfg.num_heads, scale), i, weights)
    return StepResult(a, inputs, new_kv)


FLOP_KINDS = ("kv_gen", "qkv_gen", "attention", "proj_ffn", "token_recompute_to_layer_k",
              "full_layer")


def flop_count(op_kind: str, config: ModelConfig, n_tokens: int, k: int = 0,
               context_len: int | None = None) -> int:
    """Analytic FLOPs (2 per multiply-add) for ``n_tokens`` rows through one op.

    Attention defaults to causal self-attention over the ``n_tokens`` rows; pass
    ``context_len`` for ``n_tokens`` queries against a fixed context instead.
    """
    d, f, n = config.hidden_dim, config.ffn_dim, n_tokens
    if n < 0:
        raise InputError("n_tokens must be >= 0")

    def attention():
        if context_len is None:
            return 2 * d * n * (n + 1)   # sum_t 4*d*t for t = 1..n
        return 4 * n * context_len * d

    if op_kind == "kv_gen":
        return 2 * n * d * d * 2
    if op_kind == "qkv_gen":
        return 3 * 2 * n * d * d
    if op_kind == "attention":
        return attention()
    if op_kind == "proj_ffn":
        return 2 * n * d * d + 2 * 2 * n * d * f
    if op_kind == "full_layer":
        return (flop_count("qkv_gen", config, n) + attention()
                + flop_count("proj_ffn", config, n))
    if op_kind == "token_recompute_to_layer_k":
        if k < 0:
            raise InputError("k must be >= 0")
        return k * flop_count("full_layer", config, n, context_len=context_len) \
            + flop_count("qkv_gen", config, n)
    raise InputError(f"unknown op kind {op_kind!r}; expected one of {FLOP_KINDS}")
