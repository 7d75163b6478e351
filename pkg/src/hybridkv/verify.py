"""Recompute-equivalence harness.

Runs a prefill plus a few decode steps twice: once with a plain KV cache and
once where every context block of every layer is rebuilt from a randomly
chosen source (stored KV, activation checkpoint, or token ids).  The two runs
must agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hybridkv.config import ModelConfig
from hybridkv.numerics import (
    DecoderWeights,
    KvPair,
    decode_step,
    forward,
    recompute_kv_from_activation,
    seeded_uniform,
    token_recompute_kv,
)

SOURCES = ("kv", "act", "token")


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(expected))), np.finfo(float).tiny)
    return float(np.max(np.abs(actual - expected))) / denom


@dataclass
class EquivalenceReport:
    seed: int
    config: ModelConfig
    max_rel_error: float
    sources_used: dict = field(default_factory=dict)

    def passed(self, tol: float = 1e-10) -> bool:
        return self.max_rel_error <= tol


def random_model(seed: int, max_layers: int = 6, max_dim: int = 64) -> ModelConfig:
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(2, max_dim // heads + 1))
    return ModelConfig(
        num_layers=int(rng.integers(1, max_layers + 1)),
        hidden_dim=d,
        num_heads=heads,
        ffn_dim=int(d * rng.choice([1, 2, 4])),
        vocab_size=int(rng.integers(8, 64)),
        tokens_per_block=int(rng.choice([1, 2, 4, 8])),
        max_seq=64,
        seed=seed,
    )


def check_equivalence(config: ModelConfig, prompt_len: int = 12, gen_steps: int = 3,
                      seed: int | None = None, weights: DecoderWeights | None = None,
                      recompute_weights: DecoderWeights | None = None,
                      sources=SOURCES, scale: bool = True) -> EquivalenceReport:
    """Compare hybrid context assembly against the pure KV-cache path.

    ``recompute_weights`` lets a caller corrupt the weights used on the
    recompute side only (negative control).
    """
    seed = config.seed if seed is None else seed
    weights = weights or DecoderWeights.generate(config, seed)
    recompute_weights = recompute_weights or weights
    rng = np.random.default_rng(seed + 7919)
    L, tpb = config.num_layers, config.tokens_per_block
    ids = [int(t) for t in rng.integers(0, config.vocab_size, prompt_len + gen_steps)]

    trace = forward(ids[:prompt_len], weights, scale=scale)
    # reference: plain KV cache
    ref_kv = [KvPair(kv.k.copy(), kv.v.copy()) for kv in trace.kv]
    # hybrid side keeps KV and checkpoints for every token and picks a source per block
    hyb_kv = [KvPair(kv.k.copy(), kv.v.copy()) for kv in trace.kv]
    hyb_act = [a.copy() for a in trace.inputs]

    used = {s: 0 for s in SOURCES}
    worst = 0.0
    for step in range(gen_steps):
        pos = prompt_len + step
        n_blocks = -(-pos // tpb)
        choice = [[sources[int(rng.integers(len(sources)))] for _ in range(n_blocks)]
                  for _ in range(L)]
        context = []
        for layer in range(L):
            token_kv = None
            if "token" in choice[layer]:
                token_kv = token_recompute_kv(ids[:pos], recompute_weights, layer, scale=scale)
            parts = []
            for b, src in enumerate(choice[layer]):
                lo, hi = b * tpb, min((b + 1) * tpb, pos)
                used[src] += 1
                if src == "kv":
                    parts.append(hyb_kv[layer].rows(lo, hi))
                elif src == "act":
                    parts.append(recompute_kv_from_activation(hyb_act[layer][lo:hi], layer,
                                                              recompute_weights))
                else:
                    parts.append(token_kv.rows(lo, hi))
            context.append(KvPair.concat(parts))

        ref = decode_step(ids[pos], pos, ref_kv, weights, scale=scale)
        got = decode_step(ids[pos], pos, context, weights, scale=scale)
        worst = max(worst, relative_error(got.output, ref.output))
        for layer in range(L):
            worst = max(worst, relative_error(got.inputs[layer], ref.inputs[layer]))
            ref_kv[layer] = KvPair.concat([ref_kv[layer], ref.new_kv[layer]])
            hyb_kv[layer] = KvPair.concat([hyb_kv[layer], got.new_kv[layer]])
            hyb_act[layer] = np.concatenate([hyb_act[layer], got.inputs[layer]])
    return EquivalenceReport(seed, config, worst, used)


def mutated_wk(weights: DecoderWeights, layer: int = 0, seed: int = 1) -> DecoderWeights:
    lw = weights.layers[layer]
    noise = seeded_uniform(seed, 999_983, lw.w_k.shape, -1e-3, 1e-3)
    return weights.replace_layer(layer, w_k=lw.w_k + noise)


def run_suite(seeds, max_layers: int = 6, max_dim: int = 64, prompt_len: int = 12,
              gen_steps: int = 3, tol: float = 1e-10) -> list[EquivalenceReport]:
    return [check_equivalence(random_model(s, max_layers, max_dim), prompt_len, gen_steps, seed=s)
            for s in seeds]
