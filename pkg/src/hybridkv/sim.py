"""Discrete-event model of the decode pipeline on a PCIe channel and a GPU channel.

Each generation iteration walks the decoder layer by layer; within a layer the
batch is processed mini-batch by mini-batch.  For one (layer, mini-batch) slot:

* PCIe loads the slot's host ACT blocks, then its host KV blocks, into a
  double-buffered GPU buffer (a slot may load once the slot two places earlier
  has finished its forward pass).
* The GPU regenerates K,V from the slot's ACT blocks as soon as they are
  present, then runs QKV generation, attention, projection and FFN for the new
  tokens once the layer weights, the KV load and the regeneration are done.
* The new token's KV entry or activation checkpoint is written back over PCIe
  if its block lives in host memory.

Weights for layer n+1 stream in while layer n computes (two weight buffers).
PCIe arbitration: weights, then loads (ACT before KV within a slot, older
slots first), then stores.  The GPU runs the oldest ready slot, regeneration
before forward.  Prefill is a single compute-bound stage before the first
decode iteration; the busy fractions cover the decode window only.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

from hybridkv.allocation import GpuResidency, HostAllocation, choose_kind
from hybridkv.cache import BlockKind, HybridCache, Location, bytes_of
from hybridkv.config import ModelConfig
from hybridkv.errors import CapacityError, ConfigError, InputError
from hybridkv.numerics import flop_count
from hybridkv.scheduler import PackerConfig, Request, form_minibatches
from hybridkv.timing import HardwareProfile, TimingBundle

MODES = ("hybrid", "kv_only", "act_only", "token_recompute")
PCIE, GPU, PCIE_D2H = "PCIe", "GPU", "PCIe-D2H"
EVENT_KINDS = ("weight_load", "kv_load", "act_load", "kv_gen", "qkv_and_forward",
               "kv_store", "act_store")
TRAFFIC_KEYS = ("weights", "kv_load", "act_load", "kv_store", "act_store")


@dataclass(frozen=True)
class RequestSpec:
    prompt_len: int
    gen_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.gen_len < 0:
            raise InputError("prompt_len must be >= 1 and gen_len >= 0")


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig
    bundle: TimingBundle
    profile: HardwareProfile
    allocation: HostAllocation
    act_gpu: GpuResidency
    packer: PackerConfig
    batch: tuple[RequestSpec, ...]
    mode: str = "hybrid"
    recompute_ratio: float = 0.0
    store_checkpoint_traffic: bool = True
    full_duplex: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "token_recompute":
            if not 0.0 <= self.recompute_ratio <= 1.0:
                raise ConfigError("recompute_ratio must lie in [0, 1]")
        elif self.recompute_ratio:
            raise ConfigError("recompute_ratio is only meaningful in token_recompute mode")
        if not self.batch:
            raise ConfigError("empty batch")
        object.__setattr__(self, "batch", tuple(self.batch))


@dataclass(frozen=True)
class SimEvent:
    channel: str
    kind: str
    start: float
    end: float
    layer: int
    minibatch: int
    iteration: int = 0


@dataclass
class SimMetrics:
    tokens_generated: int
    makespan: float
    throughput: float
    pcie_busy: float
    gpu_busy: float
    traffic: dict
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0
    iterations: int = 0
    num_minibatches: float = 0.0
    busy_seconds: dict = field(default_factory=dict)

    @property
    def iteration_latency(self) -> float:
        return self.decode_seconds / self.iterations if self.iterations else 0.0

    def to_dict(self) -> dict:
        return {
            "tokens_generated": self.tokens_generated,
            "makespan": self.makespan,
            "throughput": self.throughput,
            "pcie_busy": self.pcie_busy,
            "gpu_busy": self.gpu_busy,
            "traffic": dict(self.traffic),
            "prefill_seconds": self.prefill_seconds,
            "decode_seconds": self.decode_seconds,
            "iterations": self.iterations,
            "iteration_latency": self.iteration_latency,
            "num_minibatches": self.num_minibatches,
        }


class _Req:
    """Per-request block bookkeeping during a run."""

    __slots__ = ("rid", "spec", "table", "act_gpu", "act_host", "kv_host", "kv_gpu", "tok",
                 "ctx", "tail_kind", "tail_loc", "tail_fill")

    def __init__(self, rid, spec):
        self.rid, self.spec = rid, spec
        self.table = None
        self.act_gpu = self.act_host = self.kv_host = self.kv_gpu = self.tok = 0
        self.ctx = 0
        self.tail_kind = self.tail_loc = None
        self.tail_fill = 0

    @property
    def act(self):
        return self.act_gpu + self.act_host

    @property
    def kv(self):
        return self.kv_host + self.kv_gpu

    @property
    def blocks(self):
        return self.act + self.kv + self.tok


class _Placer:
    """Chooses and places each new block according to the run mode."""

    TOKEN = "TOKEN"

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        m = cfg.model
        act_gpu = cfg.act_gpu.act_gpu
        if cfg.mode == "hybrid":
            alloc = cfg.allocation
            total = alloc.act_host + act_gpu + alloc.kv_host
            if total == 0:
                raise ConfigError("hybrid mode with an empty allocation")
            self.act_fraction = (alloc.act_host + act_gpu) / total
            host_act, host_kv = alloc.act_host, alloc.kv_host
        else:
            self.act_fraction = {"kv_only": 0.0, "act_only": 1.0}.get(cfg.mode, 0.0)
            # baselines may spend all host memory left after the weights on one kind
            spare = max(0.0, cfg.profile.host_mem - cfg.bundle.s_weight_total)
            host_act = int(spare // (bytes_of(BlockKind.ACT, m) * m.num_layers))
            host_kv = int(spare // (bytes_of(BlockKind.KV, m) * m.num_layers))
        self.tok_fraction = cfg.recompute_ratio if cfg.mode == "token_recompute" else 0.0
        self.cache = HybridCache(m, {
            (BlockKind.ACT, Location.GPU): act_gpu,
            (BlockKind.ACT, Location.HOST): host_act,
            (BlockKind.KV, Location.HOST): host_kv,
        })

    def new_block(self, r: _Req):
        if self.cfg.mode == "token_recompute":
            # token-id blocks vs KV blocks, same nearest-ratio rule
            kind = choose_kind(r.tok, r.kv, self.tok_fraction)
            if kind is BlockKind.ACT:
                r.tok += 1
                r.tail_kind, r.tail_loc = self.TOKEN, None
                r.tail_fill = 0
                return
            try:
                entry = self.cache.append_block(r.table, BlockKind.KV)
            except CapacityError as exc:
                raise ConfigError(f"host memory cannot hold the batch: {exc}") from None
        else:
            kind = choose_kind(r.act, r.kv, self.act_fraction)
            try:
                entry = self.cache.append_block(r.table, kind)
            except CapacityError:
                # the ratio is a target; a full pool spills to the other kind
                other = BlockKind.KV if kind is BlockKind.ACT else BlockKind.ACT
                try:
                    entry = self.cache.append_block(r.table, other)
                except CapacityError as exc:
                    raise ConfigError(f"allocation cannot hold the batch: {exc}") from None
        if entry.kind is BlockKind.ACT:
            if entry.location is Location.GPU:
                r.act_gpu += 1
            else:
                r.act_host += 1
        elif entry.location is Location.GPU:
            r.kv_gpu += 1
        else:
            r.kv_host += 1
        r.tail_kind, r.tail_loc = entry.kind, entry.location
        r.tail_fill = 0

    def add_token(self, r: _Req):
        tpb = self.cfg.model.tokens_per_block
        if r.tail_kind is None or r.tail_fill == tpb:
            self.new_block(r)
        r.tail_fill += 1
        r.ctx += 1
        if r.tail_kind is not self.TOKEN:
            self.cache.fill_token(r.table)


class _Task:
    __slots__ = ("channel", "kind", "dur", "key", "layer", "mb", "it", "nbytes", "waiting",
                 "children", "start", "end")

    def __init__(self, channel, kind, dur, key, layer, mb, it, nbytes=0):
        self.channel, self.kind, self.dur, self.key = channel, kind, dur, key
        self.layer, self.mb, self.it, self.nbytes = layer, mb, it, nbytes
        self.waiting = 0
        self.children = []
        self.start = self.end = None


def _dep(parent, child):
    if parent is not None and child is not None:
        parent.children.append(child)
        child.waiting += 1


class _Builder:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        m = cfg.model
        self.tpb = m.tokens_per_block
        self.flops = cfg.profile.effective_flops
        self.bw = cfg.profile.pcie_bandwidth
        self.kv_block_bytes = bytes_of(BlockKind.KV, m)
        self.act_block_bytes = bytes_of(BlockKind.ACT, m)
        self.kv_tok_bytes = 2 * m.hidden_dim * m.bytes_per_scalar
        self.act_tok_bytes = m.hidden_dim * m.bytes_per_scalar
        self.tasks: list[_Task] = []
        self.store_channel = PCIE_D2H if cfg.full_duplex else PCIE

    def add(self, *args, **kw) -> _Task:
        t = _Task(*args, **kw)
        self.tasks.append(t)
        return t

    def slot_tasks(self, reqs: Sequence[_Req], slot: int, layer: int, mb: int, it: int):
        cfg, b = self.cfg, self.cfg.bundle
        act_host = sum(r.act_host for r in reqs)
        act_all = sum(r.act for r in reqs)
        kv_host = sum(r.kv_host for r in reqs)
        tok = sum(r.tok for r in reqs)

        act_load = kv_load = gen = None
        if act_host:
            # an ACT block carries half the bytes of a KV block of the same tokens
            act_load = self.add(PCIE, "act_load", b.t_load_kv(act_host * self.tpb / 2),
                                (0, slot, 1), layer, mb, it, act_host * self.act_block_bytes)
        if kv_host:
            kv_load = self.add(PCIE, "kv_load", b.t_load_kv(kv_host * self.tpb),
                               (0, slot, 2), layer, mb, it, kv_host * self.kv_block_bytes)
        if act_all:
            gen = self.add(GPU, "kv_gen", b.t_kv_gen(act_all * self.tpb), (slot, 0), layer, mb, it)
        elif tok:
            flops = sum(flop_count("full_layer", cfg.model, r.tok * self.tpb) for r in reqs if r.tok)
            gen = self.add(GPU, "kv_gen", flops / self.flops, (slot, 0), layer, mb, it)
        _dep(act_load, gen)

        fwd_flops = (flop_count("qkv_gen", cfg.model, len(reqs))
                     + flop_count("proj_ffn", cfg.model, len(reqs))
                     + sum(flop_count("attention", cfg.model, 1, context_len=r.ctx + 1)
                           for r in reqs))
        fwd = self.add(GPU, "qkv_and_forward", fwd_flops / self.flops, (slot, 1), layer, mb, it)
        _dep(kv_load, fwd)
        _dep(gen, fwd)

        stores = []
        if cfg.store_checkpoint_traffic:
            kv_st = sum(self.kv_tok_bytes for r in reqs
                        if r.tail_kind is BlockKind.KV and r.tail_loc is Location.HOST)
            act_st = sum(self.act_tok_bytes for r in reqs
                         if r.tail_kind is BlockKind.ACT and r.tail_loc is Location.HOST)
            for kind, nbytes, order in (("act_store", act_st, 0), ("kv_store", kv_st, 1)):
                if nbytes:
                    st = self.add(self.store_channel, kind, nbytes / self.bw, (1, slot, order),
                                  layer, mb, it, nbytes)
                    _dep(fwd, st)
                    stores.append(st)
        return act_load, kv_load, gen, fwd


def _prefill_seconds(cfg: SimConfig) -> float:
    m = cfg.model
    flops = sum(flop_count("full_layer", m, r.prompt_len) for r in cfg.batch) * m.num_layers
    return flops / cfg.profile.effective_flops


def _build(cfg: SimConfig):
    m = cfg.model
    placer = _Placer(cfg)
    reqs = []
    for i, spec in enumerate(cfg.batch):
        r = _Req(f"r{i:05d}", spec)
        r.table = placer.cache.create_request(r.rid, spec.prompt_len)
        for _ in range(spec.prompt_len):
            placer.add_token(r)
        reqs.append(r)

    builder = _Builder(cfg)
    L = m.num_layers
    n_iters = max(s.gen_len for s in cfg.batch)
    fwd_by_slot: list[_Task] = []
    layer_fwds: list[list[_Task]] = []   # per global layer index
    pack_cache: dict = {}
    mb_counts = []
    weight_bytes = cfg.bundle.s_weight_layer

    for it in range(n_iters):
        active = [r for r in reqs if r.spec.gen_len > it]
        sig = tuple((r.act, r.kv + r.tok) for r in active)
        packing = pack_cache.get(sig)
        if packing is None:
            by_id = {}
            items = []
            for r in active:
                by_id[r.rid] = r
                items.append(Request(r.rid, r.act + r.tok, r.kv))
            try:
                mbs = form_minibatches(items, cfg.packer, cfg.bundle, m.tokens_per_block)
            except InputError as exc:
                raise ConfigError(f"GPU buffer cannot hold a mini-batch: {exc}") from None
            packing = [[by_id[rid] for rid in mb.request_ids] for mb in mbs]
            pack_cache = {sig: packing}
        mb_counts.append(len(packing))

        # decide where each new token goes before building its store tasks
        snapshot = {}
        for r in active:
            snapshot[r.rid] = (r.act_host, r.act, r.kv_host, r.tok, r.ctx)
        for r in active:
            placer.add_token(r)
        views = {r.rid: _View(r, snapshot[r.rid]) for r in active}

        for layer in range(L):
            g = it * L + layer
            # PCIe serves transfers in the order of the slot that consumes them; inside one
            # slot weights go first, then ACT, then KV.  Stores wait behind every load.
            w = builder.add(PCIE, "weight_load", cfg.bundle.t_load_w, (0, len(fwd_by_slot), 0),
                            layer, -1, it,
                            weight_bytes)
            if g >= 2:
                for f in layer_fwds[g - 2]:
                    _dep(f, w)
            fwds = []
            for mbi, members in enumerate(packing):
                slot = len(fwd_by_slot)
                act_load, kv_load, gen, fwd = builder.slot_tasks(
                    [views[r.rid] for r in members], slot, layer, mbi, it)
                _dep(w, fwd)
                if slot >= 1:
                    _dep(fwd_by_slot[slot - 1], fwd)
                if slot >= 2:
                    prev2 = fwd_by_slot[slot - 2]
                    for t in (act_load, kv_load, gen):
                        _dep(prev2, t)
                fwd_by_slot.append(fwd)
                fwds.append(fwd)
            layer_fwds.append(fwds)
    return builder.tasks, placer, mb_counts


class _View:
    """Context-side view of a request: block counts before this iteration's token."""

    __slots__ = ("act_host", "act", "kv_host", "tok", "ctx", "tail_kind", "tail_loc")

    def __init__(self, r: _Req, snap):
        self.act_host, self.act, self.kv_host, self.tok, self.ctx = snap
        # the new token sits in the current tail block
        self.tail_kind, self.tail_loc = r.tail_kind, r.tail_loc


def simulate(cfg: SimConfig) -> tuple[SimMetrics, list[SimEvent]]:
    tasks, placer, mb_counts = _build(cfg)
    prefill = _prefill_seconds(cfg)
    channels = (PCIE, GPU, PCIE_D2H) if cfg.full_duplex else (PCIE, GPU)
    end = _run_tasks(tasks, prefill, channels)
    decode = end - prefill

    busy = {ch: 0.0 for ch in channels}
    traffic = dict.fromkeys(TRAFFIC_KEYS, 0)
    traffic_key = {"weight_load": "weights", "kv_load": "kv_load", "act_load": "act_load",
                   "kv_store": "kv_store", "act_store": "act_store"}
    events = []
    for t in tasks:
        busy[t.channel] += t.dur
        if t.kind in traffic_key:
            traffic[traffic_key[t.kind]] += t.nbytes
        events.append(SimEvent(t.channel, t.kind, t.start, t.end, t.layer, t.mb, t.it))
    events.sort(key=lambda e: (e.start, e.end, e.channel))

    tokens = sum(s.gen_len for s in cfg.batch)
    makespan = prefill + decode
    pcie_time = busy[PCIE]
    metrics = SimMetrics(
        tokens_generated=tokens,
        makespan=makespan,
        throughput=tokens / makespan if makespan > 0 else 0.0,
        pcie_busy=min(1.0, pcie_time / decode) if decode > 0 else 0.0,
        gpu_busy=min(1.0, busy[GPU] / decode) if decode > 0 else 0.0,
        traffic=traffic,
        prefill_seconds=prefill,
        decode_seconds=decode,
        iterations=len(mb_counts),
        num_minibatches=sum(mb_counts) / len(mb_counts) if mb_counts else 0.0,
        busy_seconds=busy,
    )
    return metrics, events


def _run_tasks(tasks, t0, channels):
    index = {id(t): i for i, t in enumerate(tasks)}
    ready = {ch: [] for ch in channels}
    idle = {ch: True for ch in channels}
    finishing: list = []
    for i, t in enumerate(tasks):
        if t.waiting == 0:
            heapq.heappush(ready[t.channel], (t.key, i))
    now = t0
    remaining = len(tasks)
    while remaining:
        for ch in channels:
            if idle[ch] and ready[ch]:
                _, i = heapq.heappop(ready[ch])
                t = tasks[i]
                t.start, t.end = now, now + t.dur
                idle[ch] = False
                heapq.heappush(finishing, (t.end, i))
        if not finishing:
            raise RuntimeError("simulation deadlock")
        now, i = heapq.heappop(finishing)
        done = [i]
        while finishing and finishing[0][0] == now:
            done.append(heapq.heappop(finishing)[1])
        for i in done:
            t = tasks[i]
            idle[t.channel] = True
            remaining -= 1
            for c in t.children:
                c.waiting -= 1
                if c.waiting == 0:
                    heapq.heappush(ready[c.channel], (c.key, index[id(c)]))
    return now


def traffic_report(metrics: SimMetrics, baseline: SimMetrics | None = None) -> dict:
    """Per-category bytes, context-load total, and ratios against a baseline run."""
    tr = metrics.traffic
    context = tr["kv_load"] + tr["act_load"]
    stores = tr["kv_store"] + tr["act_store"]
    out = {
        "bytes": dict(tr),
        "context_load": context,
        "stores": stores,
        "total": context + stores + tr["weights"],
    }
    if baseline is not None:
        base = traffic_report(baseline)
        out["context_ratio"] = context / base["context_load"] if base["context_load"] else None
        out["total_ratio"] = out["total"] / base["total"] if base["total"] else None
        out["reduction_vs_baseline"] = base["total"] / out["total"] if out["total"] else None
    return out


def chrome_trace(events: Sequence[SimEvent]) -> list[dict]:
    """Events in the trace-event format read by chrome://tracing and Perfetto."""
    out = []
    for e in events:
        name = e.kind if e.minibatch < 0 else f"{e.kind} L{e.layer} mb{e.minibatch}"
        out.append({"name": name, "cat": e.kind, "ph": "X", "pid": 0, "tid": e.channel,
                    "ts": e.start * 1e6, "dur": (e.end - e.start) * 1e6,
                    "args": {"layer": e.layer, "minibatch": e.minibatch, "iteration": e.iteration}})
    return out


def write_trace(events: Sequence[SimEvent], path) -> None:
    with open(path, "w") as fh:
        json.dump({"traceEvents": chrome_trace(events)}, fh)
