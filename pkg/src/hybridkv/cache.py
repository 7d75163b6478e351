"""Paged block tables for a KV/activation hybrid cache spanning host and GPU memory.

Blocks are bookkeeping records only.  A logical block covers
``tokens_per_block`` consecutive context positions and is either a KV block
(keys and values) or an ACT block (the layer input activation, half the size).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum

from hybridkv.config import ModelConfig
from hybridkv.errors import CapacityError, InputError


class BlockKind(str, Enum):
    KV = "KV"
    ACT = "ACT"


class Location(str, Enum):
    HOST = "HostMem"
    GPU = "GpuMem"


def bytes_of(kind: BlockKind, config: ModelConfig) -> int:
    """Bytes of one block for one decoder layer."""
    per_token = config.hidden_dim * config.bytes_per_scalar
    if kind is BlockKind.KV:
        per_token *= 2
    return config.tokens_per_block * per_token


@dataclass
class BlockTableEntry:
    kind: BlockKind
    location: Location
    pbn: int
    filled_tokens: int = 0


@dataclass
class BlockTable:
    request_id: str
    prompt_len: int = 0
    entries: list[BlockTableEntry] = field(default_factory=list)

    @property
    def context_len(self) -> int:
        return sum(e.filled_tokens for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "entries": [
                {"kind": e.kind.value, "location": e.location.value, "pbn": e.pbn,
                 "filled": e.filled_tokens}
                for e in self.entries
            ],
        }


class PhysicalPool:
    """Fixed-capacity pool handing out the lowest free block number first."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise InputError("pool capacity must be >= 0")
        self.capacity = capacity
        # released numbers are always below _fresh, so the heap top is the lowest free
        self._free: list[int] = []
        self._fresh = 0
        self.owner: dict[int, str] = {}

    @property
    def num_free(self) -> int:
        return self.capacity - len(self.owner)

    def allocate(self, request_id: str) -> int:
        if not self.num_free:
            raise CapacityError("pool exhausted")
        if self._free:
            pbn = heapq.heappop(self._free)
        else:
            pbn = self._fresh
            self._fresh += 1
        self.owner[pbn] = request_id
        return pbn

    def release(self, pbn: int):
        if pbn not in self.owner:
            raise InputError(f"block {pbn} is not allocated")
        del self.owner[pbn]
        heapq.heappush(self._free, pbn)


class HybridCache:
    """Block manager for one model; a single writer is assumed.

    ``capacities`` maps ``(BlockKind, Location)`` to a block count per layer.
    Pools missing from the mapping have zero capacity.  With ``gpu_kv`` set, KV
    blocks go to the GPU KV pool while it has room.
    """

    def __init__(self, config: ModelConfig, capacities: dict, gpu_kv: bool = False):
        self.config = config
        self.gpu_kv = gpu_kv
        self.pools = {
            (kind, loc): PhysicalPool(int(capacities.get((kind, loc), 0)))
            for kind in BlockKind for loc in Location
        }
        self.tables: dict[str, BlockTable] = {}

    def create_request(self, request_id: str, prompt_len: int = 0) -> BlockTable:
        if request_id in self.tables:
            raise InputError(f"request {request_id!r} already exists")
        table = BlockTable(request_id, prompt_len)
        self.tables[request_id] = table
        return table

    def _placement(self, kind: BlockKind) -> list[Location]:
        if kind is BlockKind.ACT or self.gpu_kv:
            return [Location.GPU, Location.HOST]
        return [Location.HOST]

    def append_block(self, table: BlockTable, kind: BlockKind) -> BlockTableEntry:
        self._registered(table)
        for loc in self._placement(kind):
            pool = self.pools[(kind, loc)]
            if pool.num_free:
                entry = BlockTableEntry(kind, loc, pool.allocate(table.request_id))
                table.entries.append(entry)
                return entry
        raise CapacityError(f"no free {kind.value} block for request {table.request_id!r}")

    def fill_token(self, table: BlockTable):
        self._registered(table)
        if not table.entries:
            raise InputError(f"request {table.request_id!r} has no block to fill")
        last = table.entries[-1]
        if last.filled_tokens >= self.config.tokens_per_block:
            raise InputError(f"last block of {table.request_id!r} is full; append a block first")
        last.filled_tokens += 1

    def blocks_by_kind(self, table: BlockTable) -> tuple[int, int]:
        act = sum(1 for e in table.entries if e.kind is BlockKind.ACT)
        return act, len(table.entries) - act

    def free_request(self, table: BlockTable | str):
        rid = table if isinstance(table, str) else table.request_id
        if rid not in self.tables:
            raise InputError(f"unknown request {rid!r}")
        table = self.tables.pop(rid)
        for e in table.entries:
            self.pools[(e.kind, e.location)].release(e.pbn)

    def _registered(self, table: BlockTable):
        if self.tables.get(table.request_id) is not table:
            raise InputError(f"request {table.request_id!r} is not registered")

    def check_invariants(self):
        """Full-scan check of ownership, conservation and table shape."""
        tpb = self.config.tokens_per_block
        seen = set()
        for rid, table in self.tables.items():
            for i, e in enumerate(table.entries):
                key = (e.kind, e.location, e.pbn)
                assert key not in seen, f"block {key} owned twice"
                seen.add(key)
                assert self.pools[(e.kind, e.location)].owner.get(e.pbn) == rid
                assert 0 <= e.filled_tokens <= tpb
                if i < len(table.entries) - 1:
                    assert e.filled_tokens == tpb, "only the last block may be partial"
        for key, pool in self.pools.items():
            assert len(pool.owner) <= pool.capacity, f"pool {key} over capacity"
            free = set(pool._free)
            assert len(free) == len(pool._free) and not free & set(pool.owner), f"leak in {key}"
            assert len(free) + len(pool.owner) == pool._fresh, f"lost block in pool {key}"

    def dump(self) -> dict:
        return {"tables": [self.tables[r].to_dict() for r in sorted(self.tables)]}

    def dump_json(self, **kw) -> str:
        return json.dumps(self.dump(), **kw)
