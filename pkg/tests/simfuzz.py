"""Random tiny simulator configurations and the invariant checks run on them."""

from collections import defaultdict

import numpy as np

from hybridkv.allocation import GpuResidency, HostAllocation
from hybridkv.config import ModelConfig
from hybridkv.scheduler import PackerConfig
from hybridkv.sim import RequestSpec, SimConfig, simulate
from hybridkv.timing import HardwareProfile, LinearTimeModel, TimingBundle, weight_bytes

EPS = 1e-12


def random_sim_config(seed: int, mode: str | None = None) -> SimConfig:
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    model = ModelConfig(num_layers=int(rng.integers(1, 5)), hidden_dim=heads * int(rng.integers(2, 17)),
                        num_heads=heads, tokens_per_block=int(rng.choice([1, 2, 4, 8, 16])),
                        vocab_size=64, max_seq=128)
    per_layer, total = weight_bytes(model)
    bundle = TimingBundle(
        LinearTimeModel(float(rng.uniform(1e-7, 1e-4)), float(rng.choice([0.0, rng.uniform(0, 1e-4)]))),
        LinearTimeModel(float(rng.uniform(1e-7, 1e-4)), float(rng.choice([0.0, rng.uniform(0, 1e-4)]))),
        float(rng.uniform(0, 1e-3)), per_layer, total)
    profile = HardwareProfile(pcie_bandwidth=float(rng.uniform(1e6, 1e9)),
                              gpu_throughput=float(rng.uniform(1e8, 1e11)),
                              host_mem=1e12)
    n = int(rng.integers(1, 7))
    batch = tuple(RequestSpec(int(rng.integers(1, 41)), int(rng.integers(0, 5))) for _ in range(n))
    if all(r.gen_len == 0 for r in batch):
        batch = batch[:-1] + (RequestSpec(batch[-1].prompt_len, 1),)
    tpb = model.tokens_per_block
    blocks = [-(-(r.prompt_len + r.gen_len) // tpb) for r in batch]
    mode = mode or str(rng.choice(["hybrid", "kv_only", "act_only", "token_recompute"]))
    # every single request must fit the buffers; batches of several may not
    cap = max(blocks)
    packer = PackerConfig(cap + int(rng.integers(0, 2 * cap + 1)), cap + int(rng.integers(0, 2 * cap + 1)))
    alloc = HostAllocation.forced(int(rng.integers(0, sum(blocks) + 1)), sum(blocks))
    return SimConfig(model, bundle, profile, alloc, GpuResidency(int(rng.integers(0, 6))), packer,
                     batch, mode,
                     recompute_ratio=float(rng.uniform()) if mode == "token_recompute" else 0.0,
                     store_checkpoint_traffic=bool(rng.integers(0, 2)),
                     full_duplex=bool(rng.integers(0, 2)))


def check_invariants(cfg: SimConfig, metrics, events):
    # channel exclusivity
    by_channel = defaultdict(list)
    for e in events:
        assert e.end >= e.start, e
        by_channel[e.channel].append(e)
    for evs in by_channel.values():
        evs.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            assert a.end <= b.start + EPS, (a, b)

    # dependency ordering
    index = {}
    weights = {}
    for e in events:
        if e.kind == "weight_load":
            weights[(e.iteration, e.layer)] = e
        else:
            index[(e.kind, e.iteration, e.layer, e.minibatch)] = e
    slots = sorted({(it, layer, mb) for (kind, it, layer, mb) in index if kind == "qkv_and_forward"})
    for s, (it, layer, mb) in enumerate(slots):
        fwd = index[("qkv_and_forward", it, layer, mb)]
        assert weights[(it, layer)].end <= fwd.start + EPS
        for kind in ("kv_load", "kv_gen"):
            dep = index.get((kind, it, layer, mb))
            if dep is not None:
                assert dep.end <= fwd.start + EPS, (dep, fwd)
        gen, act = index.get(("kv_gen", it, layer, mb)), index.get(("act_load", it, layer, mb))
        if act is not None:
            assert gen is not None and act.end <= gen.start + EPS
        for kind in ("kv_store", "act_store"):
            st = index.get((kind, it, layer, mb))
            if st is not None:
                assert fwd.end <= st.start + EPS
        if s >= 1:
            prev = index[("qkv_and_forward",) + slots[s - 1]]
            assert prev.end <= fwd.start + EPS
        if s >= 2:
            # double buffering: a slot's inputs are fetched only once slot s-2 has finished
            prev2 = index[("qkv_and_forward",) + slots[s - 2]]
            for kind in ("act_load", "kv_load", "kv_gen"):
                dep = index.get((kind, it, layer, mb))
                if dep is not None:
                    assert prev2.end <= dep.start + EPS

    # work conservation
    busy = defaultdict(float)
    for e in events:
        busy[e.channel] += e.end - e.start
    decode = metrics.decode_seconds
    tol = 1e-9 * max(decode, 1e-30)
    for ch, t in busy.items():
        assert t <= decode + tol, (ch, t, decode)
    assert abs(metrics.makespan - (metrics.prefill_seconds + decode)) <= tol + 1e-15
    if events:
        assert abs(max(e.end for e in events) - metrics.makespan) <= tol + 1e-15
    assert 0.0 <= metrics.pcie_busy <= 1.0 and 0.0 <= metrics.gpu_busy <= 1.0
    assert metrics.throughput == metrics.tokens_generated / metrics.makespan
    if not cfg.store_checkpoint_traffic:
        assert metrics.traffic["kv_store"] == metrics.traffic["act_store"] == 0


def check_degeneracy(cfg: SimConfig):
    """Hybrid with one kind of host block reproduces the matching baseline exactly."""
    from dataclasses import replace
    total = cfg.allocation.act_host + cfg.allocation.kv_host
    out = []
    for alloc, base, gpu in ((HostAllocation.forced(0, total), "kv_only", 0),
                             (HostAllocation.forced(total, 0), "act_only", cfg.act_gpu.act_gpu)):
        h = replace(cfg, mode="hybrid", recompute_ratio=0.0, allocation=alloc,
                    act_gpu=GpuResidency(gpu))
        b = replace(cfg, mode=base, recompute_ratio=0.0, act_gpu=GpuResidency(gpu))
        out.append(simulate(h)[1] == simulate(b)[1])
    return all(out)
