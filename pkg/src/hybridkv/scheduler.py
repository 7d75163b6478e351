"""Greedy mini-batch formation under GPU buffer capacities, plus an exhaustive oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from hybridkv.cache import BlockKind, bytes_of
from hybridkv.config import ModelConfig
from hybridkv.errors import InputError
from hybridkv.timing import TimingBundle

INF = math.inf


@dataclass(frozen=True)
class Request:
    id: str
    act_blocks: int
    kv_blocks: int

    @property
    def total(self) -> int:
        return self.act_blocks + self.kv_blocks


@dataclass
class MiniBatch:
    request_ids: list = field(default_factory=list)
    act_mb: int = 0
    kv_mb: int = 0

    def add(self, req: Request):
        self.request_ids.append(req.id)
        self.act_mb += req.act_blocks
        self.kv_mb += req.kv_blocks

    def to_dict(self) -> dict:
        return {"requests": list(self.request_ids), "act_blocks": self.act_mb,
                "kv_blocks": self.kv_mb}


@dataclass(frozen=True)
class PackerConfig:
    act_max: int
    kv_max: int

    def __post_init__(self):
        if self.act_max < 1 or self.kv_max < 1:
            raise InputError("act_max and kv_max must be >= 1")

    @classmethod
    def from_buffers(cls, config: ModelConfig, act_buffer_bytes: float,
                     kv_buffer_bytes: float) -> "PackerConfig":
        """Capacities of one layer's ACT and KV buffers, in blocks."""
        return cls(int(act_buffer_bytes // bytes_of(BlockKind.ACT, config)),
                   int(kv_buffer_bytes // bytes_of(BlockKind.KV, config)))


def balance_of(act_blocks: int, kv_blocks: int, bundle: TimingBundle,
               tokens_per_block: int) -> float:
    """Predicted recompute time over predicted KV-load time.

    A side with no blocks has no work and costs zero time, intercept or not.
    """
    num = bundle.t_kv_gen(act_blocks * tokens_per_block) if act_blocks else 0.0
    den = bundle.t_load_kv(kv_blocks * tokens_per_block) if kv_blocks else 0.0
    if den == 0:
        return 1.0 if num == 0 else INF
    return num / den


def balance(mb: MiniBatch, bundle: TimingBundle, tokens_per_block: int) -> float:
    return balance_of(mb.act_mb, mb.kv_mb, bundle, tokens_per_block)


def fb(b: float) -> float:
    if b == 0:
        return INF
    return max(b, 1.0 / b)


def cost_fb(mb: MiniBatch, bundle: TimingBundle, tokens_per_block: int) -> float:
    return fb(balance(mb, bundle, tokens_per_block))


def _as_requests(requests) -> list[Request]:
    out = []
    for r in requests:
        out.append(r if isinstance(r, Request) else Request(str(r[0]), int(r[1]), int(r[2])))
    ids = [r.id for r in out]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate request ids")
    return out


def _check_fits(reqs: list[Request], cfg: PackerConfig):
    for r in reqs:
        if r.act_blocks > cfg.act_max or r.kv_blocks > cfg.kv_max:
            raise InputError(
                f"request {r.id!r} ({r.act_blocks} ACT, {r.kv_blocks} KV) exceeds "
                f"mini-batch capacity ({cfg.act_max} ACT, {cfg.kv_max} KV)")


def form_minibatches(requests, cfg: PackerConfig, bundle: TimingBundle, tokens_per_block: int,
                     log: list | None = None) -> list[MiniBatch]:
    """Greedy packing: a request joins the open batch if it fits and F_b does not grow.

    Requests are scanned largest-first (ties by id).  The open batch is closed
    once a full scan admits nobody.  When ``log`` is a list, each accepted
    insertion is appended as ``(batch_index, request_id, fb_before, fb_after)``.
    """
    reqs = _as_requests(requests)
    _check_fits(reqs, cfg)
    pending = sorted(reqs, key=lambda r: (-r.total, r.id))
    batches: list[MiniBatch] = []
    while pending:
        mb = MiniBatch()
        first = pending.pop(0)
        mb.add(first)
        if log is not None:
            log.append((len(batches), first.id, None, cost_fb(mb, bundle, tokens_per_block)))
        current = cost_fb(mb, bundle, tokens_per_block)
        progress = True
        while progress and pending:
            progress = False
            keep = []
            for r in pending:
                act, kv = mb.act_mb + r.act_blocks, mb.kv_mb + r.kv_blocks
                if act <= cfg.act_max and kv <= cfg.kv_max:
                    after = fb(balance_of(act, kv, bundle, tokens_per_block))
                    if after <= current:
                        mb.add(r)
                        if log is not None:
                            log.append((len(batches), r.id, current, after))
                        current = after
                        progress = True
                        continue
                keep.append(r)
            pending = keep
        batches.append(mb)
    return batches


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def mean_fb(batches: list[MiniBatch], bundle: TimingBundle, tokens_per_block: int) -> float:
    return sum(cost_fb(b, bundle, tokens_per_block) for b in batches) / len(batches)


def brute_force_pack(requests, cfg: PackerConfig, bundle: TimingBundle, tokens_per_block: int,
                     max_requests: int = 10) -> list[MiniBatch]:
    """Exhaustive search over set partitions; minimizes (batch count, mean F_b)."""
    reqs = _as_requests(requests)
    if len(reqs) > max_requests:
        raise InputError(f"brute force limited to {max_requests} requests, got {len(reqs)}")
    _check_fits(reqs, cfg)
    reqs = sorted(reqs, key=lambda r: r.id)
    best, best_key = None, None
    for part in _set_partitions(reqs):
        if best_key is not None and len(part) > best_key[0]:
            continue
        batches = []
        for group in part:
            mb = MiniBatch()
            for r in group:
                mb.add(r)
            if mb.act_mb > cfg.act_max or mb.kv_mb > cfg.kv_max:
                break
            batches.append(mb)
        else:
            key = (len(batches), mean_fb(batches, bundle, tokens_per_block))
            if best_key is None or key < best_key:
                best, best_key = batches, key
    return best
