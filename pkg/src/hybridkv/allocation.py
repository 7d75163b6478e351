"""Host-memory split between ACT and KV blocks, and per-request block-kind choice.

All block counts are per decoder layer: a block count ``n`` occupies
``n * num_layers`` physical per-layer blocks in host memory, and the timing
models describe one layer of one generation iteration.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from hybridkv.cache import BlockKind, bytes_of
from hybridkv.config import ModelConfig
from hybridkv.errors import CapacityError, InputError
from hybridkv.timing import TimingBundle


@dataclass(frozen=True)
class HostMemory:
    m_host: float        # total host capacity, bytes
    s_weight: float      # all weight parameters, bytes
    s_kv: float          # one KV block across all layers, bytes
    s_act: float         # one ACT block across all layers, bytes

    @classmethod
    def for_model(cls, config: ModelConfig, m_host: float, s_weight: float) -> "HostMemory":
        return cls(m_host, s_weight,
                   bytes_of(BlockKind.KV, config) * config.num_layers,
                   bytes_of(BlockKind.ACT, config) * config.num_layers)


@dataclass(frozen=True)
class HostAllocation:
    act_host: int
    kv_host: int
    act_init: int = 0
    kv_init: int = 0
    act_remain: int = 0
    kv_remain: int = 0

    def __post_init__(self):
        if min(self.act_host, self.kv_host, self.act_init, self.kv_init,
               self.act_remain, self.kv_remain) < 0:
            raise InputError("block counts must be >= 0")

    @classmethod
    def forced(cls, act_host: int, kv_host: int) -> "HostAllocation":
        """An allocation not produced by the planner (e.g. KV-only baselines)."""
        return cls(act_host, kv_host, 0, 0, act_host, kv_host)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GpuResidency:
    act_gpu: int = 0


def initial_cache_allocation(bundle: TimingBundle, act_gpu: int,
                             tokens_per_block: int) -> tuple[int, int]:
    """Step 1: size host blocks so weight loading and GPU-ACT recompute overlap."""
    budget = bundle.t_load_w - bundle.t_kv_gen(act_gpu * tokens_per_block)
    if budget >= 0:
        if bundle.t_kv_gen.slope == 0:
            return 0, 0
        return bundle.t_kv_gen.invert(budget) // tokens_per_block, 0
    if bundle.t_load_kv.slope == 0:
        return 0, 0
    return 0, bundle.t_load_kv.invert(-budget) // tokens_per_block


def alloc_remaining(bundle: TimingBundle, mem: HostMemory, act_init: int, kv_init: int,
                    tokens_per_block: int, act_gpu: int | None = None) -> tuple[int, int]:
    """Step 2: fill leftover host memory with a time-balanced ACT/KV mix.

    Solves  s_act*x + s_kv*y = M_remaining  together with a time balance, then
    floors.  A negative root is clamped to zero and the memory given entirely
    to the other kind.

    Without ``act_gpu`` the balance is the bare ``T_kv_gen(x) = T_load_kv(y)``
    over the new blocks alone.  With ``act_gpu`` it is taken over the layer
    totals, ``T_kv_gen(act_gpu + act_init + x) = T_load_w + T_load_kv(kv_init + y)``,
    so step 1's rounding and the intercepts are paid once rather than twice.
    Both agree exactly when intercepts are zero and step 1 did not round.
    """
    occupied = mem.s_act * act_init + mem.s_kv * kv_init
    remaining = mem.m_host - mem.s_weight - occupied
    if remaining < 0:
        raise CapacityError(
            f"host memory {mem.m_host:.4g} B cannot hold weights {mem.s_weight:.4g} B "
            f"plus initial blocks {occupied:.4g} B")
    g, l = bundle.t_kv_gen, bundle.t_load_kv
    b = tokens_per_block
    #  g.slope*b*x - l.slope*b*y = rhs_t
    #  s_act*x     + s_kv*y      = remaining
    det = g.slope * b * mem.s_kv + l.slope * b * mem.s_act
    if det <= 0:
        raise InputError("both timing models have zero slope; balance is undefined")
    rhs_t = l.intercept - g.intercept
    if act_gpu is not None:
        rhs_t += bundle.t_load_w + l.slope * b * kv_init - g.slope * b * (act_gpu + act_init)
    x = (rhs_t * mem.s_kv + l.slope * b * remaining) / det
    y = (g.slope * b * remaining - mem.s_act * rhs_t) / det
    if x < 0:
        x, y = 0.0, remaining / mem.s_kv
    elif y < 0:
        x, y = remaining / mem.s_act, 0.0
    x, y = math.floor(x + 1e-9), math.floor(y + 1e-9)
    # flooring with the tolerance above must never overrun memory
    while x and mem.s_act * x + mem.s_kv * y > remaining:
        x -= 1
    while y and mem.s_act * x + mem.s_kv * y > remaining:
        y -= 1
    return x, y


def plan_host_allocation(bundle: TimingBundle, mem: HostMemory, act_gpu: GpuResidency | int,
                         tokens_per_block: int) -> HostAllocation:
    gpu = act_gpu.act_gpu if isinstance(act_gpu, GpuResidency) else int(act_gpu)
    act_init, kv_init = initial_cache_allocation(bundle, gpu, tokens_per_block)
    act_rem, kv_rem = alloc_remaining(bundle, mem, act_init, kv_init, tokens_per_block, gpu)
    return HostAllocation(act_init + act_rem, kv_init + kv_rem, act_init, kv_init, act_rem, kv_rem)


def predicted_times(bundle: TimingBundle, act_host: int, kv_host: int, act_gpu: int,
                    tokens_per_block: int) -> tuple[float, float]:
    """(T_PCIe, T_Computation) of one layer when every planned block is in use."""
    t_pcie = bundle.t_load_w + bundle.t_load_kv(kv_host * tokens_per_block)
    t_comp = bundle.t_kv_gen((act_host + act_gpu) * tokens_per_block)
    return t_pcie, t_comp


def next_block_kind(act_req: int, kv_req: int, allocation: HostAllocation,
                    act_gpu: int = 0) -> BlockKind:
    """Kind of the request's next block that keeps its ACT:KV ratio closest to the plan.

    The target is ``act_host : kv_host``.  Passing ``act_gpu`` folds GPU-resident
    ACT capacity into the ACT side of the target.
    """
    act_target = allocation.act_host + act_gpu
    total = act_target + allocation.kv_host
    if total <= 0:
        raise InputError("allocation has no blocks; ratio undefined")
    return choose_kind(act_req, kv_req, act_target / total)


def choose_kind(act_req: int, kv_req: int, act_fraction: float) -> BlockKind:
    n = act_req + kv_req + 1
    err_act = abs((act_req + 1) / n - act_fraction)
    err_kv = abs(act_req / n - act_fraction)
    return BlockKind.ACT if err_act <= err_kv else BlockKind.KV
