"""Glue that turns a model, a hardware profile and a workload into simulator runs."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from hybridkv.allocation import (
    GpuResidency,
    HostAllocation,
    HostMemory,
    alloc_remaining,
    initial_cache_allocation,
    plan_host_allocation,
)
from hybridkv.cache import BlockKind, bytes_of
from hybridkv.config import ModelConfig
from hybridkv.errors import CapacityError, ConfigError, InputError
from hybridkv.scheduler import PackerConfig
from hybridkv.sim import RequestSpec, SimConfig, SimMetrics, simulate
from hybridkv.timing import GiB, HardwareProfile, TimingBundle, calibrate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GpuLayout:
    """How GPU memory is carved up besides weights: one buffer pair per slot, double-buffered."""

    act_buffer_bytes: float = 0.5 * GiB
    kv_buffer_bytes: float = 1.0 * GiB
    reserve_bytes: float = 2.0 * GiB


def default_act_gpu(model: ModelConfig, profile: HardwareProfile, bundle: TimingBundle,
                    layout: GpuLayout = GpuLayout()) -> GpuResidency:
    """ACT blocks per layer that fit in the GPU memory left over by weights and buffers."""
    used = (2 * bundle.s_weight_layer + 2 * (layout.act_buffer_bytes + layout.kv_buffer_bytes)
            + layout.reserve_bytes)
    free = profile.gpu_mem - used
    per_block = bytes_of(BlockKind.ACT, model) * model.num_layers
    return GpuResidency(max(0, int(free // per_block)))


def default_packer(model: ModelConfig, layout: GpuLayout = GpuLayout()) -> PackerConfig:
    return PackerConfig.from_buffers(model, layout.act_buffer_bytes, layout.kv_buffer_bytes)


def host_memory(model: ModelConfig, profile: HardwareProfile, bundle: TimingBundle) -> HostMemory:
    return HostMemory.for_model(model, profile.host_mem, bundle.s_weight_total)


def plan(model: ModelConfig, profile: HardwareProfile, bundle: TimingBundle,
         act_gpu: GpuResidency) -> HostAllocation:
    """The two-step allocation over the whole of host memory."""
    return plan_host_allocation(bundle, host_memory(model, profile, bundle), act_gpu,
                                model.tokens_per_block)


def workload_blocks(model: ModelConfig, batch) -> int:
    """Context blocks per layer the batch holds once every request finishes."""
    tpb = model.tokens_per_block
    return sum(-(-(r.prompt_len + r.gen_len) // tpb) for r in batch)


def balanced_act_gpu(bundle: TimingBundle, cap: int, n_blocks: int, tokens_per_block: int) -> int:
    """Largest G <= cap with T_kv_gen(G) <= T_load_w + T_load_kv(n_blocks - G)."""

    def fits(g):
        load = bundle.t_load_kv((n_blocks - g) * tokens_per_block) if n_blocks > g else 0.0
        gen = bundle.t_kv_gen(g * tokens_per_block) if g else 0.0
        return gen <= bundle.t_load_w + load

    lo, hi = 0, cap
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def plan_for_workload(model: ModelConfig, profile: HardwareProfile, bundle: TimingBundle,
                      act_gpu_capacity: int, n_blocks: int) -> tuple[HostAllocation, GpuResidency]:
    """Two-step allocation with inputs sized to the batch instead of the machine.

    GPU-resident ACT is capped at the batch's block count, and further at the
    point where its recompute time would outgrow weight loading plus loading
    every other block as KV.  Host memory is capped at what the remaining
    blocks would occupy as KV.  A first-step allocation that does not fit that
    memory is cut down to it.
    """
    tpb = model.tokens_per_block
    gpu = GpuResidency(balanced_act_gpu(bundle, min(act_gpu_capacity, n_blocks), n_blocks, tpb))
    mem = host_memory(model, profile, bundle)
    spare = mem.m_host - mem.s_weight
    if spare < 0:
        raise CapacityError("host memory cannot hold the weights")
    host_blocks = n_blocks - gpu.act_gpu
    budget = min(spare, host_blocks * mem.s_kv)
    act_init, kv_init = initial_cache_allocation(bundle, gpu.act_gpu, tpb)
    act_init = min(act_init, int(budget // mem.s_act))
    kv_init = min(kv_init, int(budget // mem.s_kv))
    sized = HostMemory(mem.s_weight + budget, mem.s_weight, mem.s_kv, mem.s_act)
    act_rem, kv_rem = alloc_remaining(bundle, sized, act_init, kv_init, tpb, gpu.act_gpu)
    # flooring can leave the pools a few blocks short of the batch; top up with KV
    short = host_blocks - (act_init + act_rem + kv_init + kv_rem)
    if short > 0:
        room = int((spare - mem.s_act * (act_init + act_rem)
                    - mem.s_kv * (kv_init + kv_rem)) // mem.s_kv)
        kv_rem += max(0, min(short, room))
    alloc = HostAllocation(act_init + act_rem, kv_init + kv_rem, act_init, kv_init,
                           act_rem, kv_rem)
    return alloc, gpu


@dataclass
class Setup:
    """Everything mode-independent for one model/profile pair.

    ``act_gpu`` is the GPU ACT capacity.  Unless ``allocation`` is pinned, each
    simulated workload gets its own plan from :func:`plan_for_workload`.
    """

    model: ModelConfig
    profile: HardwareProfile
    bundle: TimingBundle
    act_gpu: GpuResidency
    packer: PackerConfig
    allocation: HostAllocation | None = None

    @classmethod
    def build(cls, model: ModelConfig, profile: HardwareProfile | None = None,
              bundle: TimingBundle | None = None, seed: int = 0,
              layout: GpuLayout = GpuLayout(), act_gpu: GpuResidency | None = None,
              allocation: HostAllocation | None = None,
              packer: PackerConfig | None = None) -> "Setup":
        profile = profile or HardwareProfile()
        bundle = bundle or calibrate(profile, model, seed=seed)
        act_gpu = act_gpu if act_gpu is not None else default_act_gpu(model, profile, bundle, layout)
        packer = packer or default_packer(model, layout)
        return cls(model, profile, bundle, act_gpu, packer, allocation)

    def plan_batch(self, batch) -> tuple[HostAllocation, GpuResidency]:
        n = workload_blocks(self.model, batch)
        if self.allocation is not None:
            return self.allocation, GpuResidency(min(self.act_gpu.act_gpu, n))
        return plan_for_workload(self.model, self.profile, self.bundle, self.act_gpu.act_gpu, n)

    def config(self, mode: str, batch_size: int, prompt_len: int, gen_len: int,
               recompute_ratio: float = 0.0, **kw) -> SimConfig:
        batch = tuple(RequestSpec(prompt_len, gen_len) for _ in range(batch_size))
        allocation, gpu = self.plan_batch(batch)
        return SimConfig(self.model, self.bundle, self.profile, allocation, gpu,
                         self.packer, batch, mode, recompute_ratio, **kw)


@dataclass(frozen=True)
class SweepPoint:
    mode: str
    batch: int
    prompt_len: int
    gen_len: int
    recompute_ratio: float = 0.0


@dataclass
class SweepRow:
    point: SweepPoint
    metrics: SimMetrics | None = None
    error: str | None = None


CSV_COLUMNS = ["mode", "batch", "prompt_len", "gen_len", "recompute_ratio", "throughput_tok_s",
               "pcie_busy", "gpu_busy", "makespan_s", "iteration_latency_s",
               "traffic_weights", "traffic_kv_load", "traffic_act_load", "traffic_kv_store",
               "traffic_act_store", "error"]


def grid(modes, batch_sizes, prompt_lens, gen_len, recompute_ratios=(0.5,)) -> list[SweepPoint]:
    points = []
    for mode in modes:
        ratios = recompute_ratios if mode == "token_recompute" else (0.0,)
        for b in batch_sizes:
            for p in prompt_lens:
                for r in ratios:
                    points.append(SweepPoint(mode, b, p, gen_len, r))
    return points


def run_point(setup: Setup, point: SweepPoint) -> SweepRow:
    try:
        cfg = setup.config(point.mode, point.batch, point.prompt_len, point.gen_len,
                           point.recompute_ratio)
        metrics, _ = simulate(cfg)
        return SweepRow(point, metrics)
    except (ConfigError, InputError, CapacityError) as exc:
        log.warning("sweep point %s failed: %s", point, exc)
        return SweepRow(point, None, f"{type(exc).__name__}: {exc}")


def _run_star(args):
    return run_point(*args)


def sweep(setup: Setup, points, jobs: int = 1) -> list[SweepRow]:
    """One row per point; a failing point records its error and the rest continue."""
    points = list(points)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_star, [(setup, p) for p in points]))
    return [run_point(setup, p) for p in points]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        p, m = row.point, row.metrics
        if m is None:
            w.writerow([p.mode, p.batch, p.prompt_len, p.gen_len, p.recompute_ratio]
                       + [""] * (len(CSV_COLUMNS) - 6) + [row.error])
            continue
        t = m.traffic
        w.writerow([p.mode, p.batch, p.prompt_len, p.gen_len, p.recompute_ratio,
                    repr(m.throughput), repr(m.pcie_busy), repr(m.gpu_busy), repr(m.makespan),
                    repr(m.iteration_latency), t["weights"], t["kv_load"], t["act_load"],
                    t["kv_store"], t["act_store"], ""])
    return buf.getvalue()
