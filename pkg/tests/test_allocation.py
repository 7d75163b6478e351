import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hybridkv.allocation import (
    GpuResidency,
    HostAllocation,
    HostMemory,
    alloc_remaining,
    choose_kind,
    initial_cache_allocation,
    next_block_kind,
    plan_host_allocation,
    predicted_times,
)
from hybridkv.cache import BlockKind
from hybridkv.config import preset
from hybridkv.errors import CapacityError, InputError
from hybridkv.timing import LinearTimeModel, TimingBundle

import oracles


def bundle(g_slope, l_slope, t_w, g_icpt=0.0, l_icpt=0.0):
    return TimingBundle(LinearTimeModel(g_slope, g_icpt), LinearTimeModel(l_slope, l_icpt),
                        t_w, 1, 1)


# -- step 1 -----------------------------------------------------------------------------------

def test_step1_act_branch_hand_example():
    # 1 ms per 100 tokens, 10 ms weight load, no GPU ACT: 1000 tokens = 62 blocks of 16
    b = bundle(1e-5, 1e-5, 10e-3)
    assert initial_cache_allocation(b, 0, 16) == (62, 0)


def test_step1_zero_budget_boundary():
    b = bundle(1e-5, 1e-5, 16 * 10 * 1e-5)
    assert initial_cache_allocation(b, 10, 16) == (0, 0)


def test_step1_kv_branch_hand_example():
    # 100 GPU ACT blocks take 14 ms to regenerate against a 10 ms weight load: budget -4 ms;
    # at 1 ms per 250 tokens of KV load that is 1000 tokens = 62 blocks
    b = bundle(14e-3 / 1600, 4e-6, 10e-3)
    assert initial_cache_allocation(b, 100, 16) == (0, 62)


@settings(max_examples=200, deadline=None)
@given(g=st.floats(1e-9, 1e-3), l=st.floats(1e-9, 1e-3), t_w=st.floats(0, 1.0),
       cg=st.floats(0, 1e-2), cl=st.floats(0, 1e-2), gpu=st.integers(0, 5000),
       tpb=st.sampled_from([1, 8, 16]))
def test_step1_at_most_one_nonzero(g, l, t_w, cg, cl, gpu, tpb):
    a, k = initial_cache_allocation(bundle(g, l, t_w, cg, cl), gpu, tpb)
    assert a >= 0 and k >= 0 and (a == 0 or k == 0)


# -- step 2 -----------------------------------------------------------------------------------

def test_step2_symmetric_slopes_split_one_to_two_by_bytes():
    b = bundle(2e-6, 2e-6, 0.0)
    mem = HostMemory(m_host=3000, s_weight=0, s_kv=2, s_act=1)
    x, y = alloc_remaining(b, mem, 0, 0, 16)
    assert x == y == 1000
    assert (x * mem.s_act) * 2 == y * mem.s_kv


def test_step2_double_recompute_slope_halves_act_tokens():
    b = bundle(2e-6, 1e-6, 0.0)
    mem = HostMemory(m_host=100, s_weight=0, s_kv=2, s_act=1)
    # x + 2y = 100 and 2x = y  ->  x = 20, y = 40
    assert alloc_remaining(b, mem, 0, 0, 16) == (20, 40)


def test_step2_no_memory_left():
    b = bundle(2e-6, 1e-6, 0.0)
    mem = HostMemory(m_host=50, s_weight=40, s_kv=2, s_act=1)
    assert alloc_remaining(b, mem, 6, 2, 16) == (0, 0)
    with pytest.raises(CapacityError):
        alloc_remaining(b, mem, 6, 3, 16)


def test_step2_negative_root_clamps_to_other_kind():
    # KV load intercept is so large that balance would need negative KV
    b = bundle(1e-6, 1e-6, 0.0, g_icpt=0.0, l_icpt=10.0)
    mem = HostMemory(m_host=100, s_weight=0, s_kv=2, s_act=1)
    assert alloc_remaining(b, mem, 0, 0, 16) == (100, 0)
    b = bundle(1e-6, 1e-6, 0.0, g_icpt=10.0, l_icpt=0.0)
    assert alloc_remaining(b, mem, 0, 0, 16) == (0, 50)


def test_step2_zero_slopes_rejected():
    with pytest.raises(InputError):
        alloc_remaining(bundle(0, 0, 0), HostMemory(10, 0, 2, 1), 0, 0, 16)


# -- composed plan ----------------------------------------------------------------------------

profiles = st.builds(
    dict,
    g=st.floats(1e-8, 1e-5), l=st.floats(1e-8, 1e-5), t_w=st.floats(1e-4, 5e-2),
    cg=st.floats(0, 1e-3), cl=st.floats(0, 1e-3), gpu=st.integers(0, 400),
    s_act=st.integers(1, 1000), m_blocks=st.integers(0, 20000), tpb=st.sampled_from([1, 16]),
)


def _plan(p):
    b = bundle(p["g"], p["l"], p["t_w"], p["cg"], p["cl"])
    s_act = p["s_act"]
    mem = HostMemory(m_host=10 ** 9 + p["m_blocks"] * s_act, s_weight=10 ** 9,
                     s_kv=2 * s_act, s_act=s_act)
    try:
        alloc = plan_host_allocation(b, mem, GpuResidency(p["gpu"]), p["tpb"])
    except CapacityError:
        return b, mem, None
    return b, mem, alloc


@settings(max_examples=300, deadline=None)
@given(p=profiles)
def test_plan_memory_safety_and_audit_trail(p):
    b, mem, alloc = _plan(p)
    if alloc is None:
        # the first step alone overflowed host memory
        a0, k0 = initial_cache_allocation(b, p["gpu"], p["tpb"])
        assert a0 * mem.s_act + k0 * mem.s_kv > mem.m_host - mem.s_weight
        return
    assert alloc.act_host == alloc.act_init + alloc.act_remain
    assert alloc.kv_host == alloc.kv_init + alloc.kv_remain
    assert alloc.act_host * mem.s_act + alloc.kv_host * mem.s_kv <= mem.m_host - mem.s_weight


@settings(max_examples=500, deadline=None)
@given(p=profiles)
def test_plan_balance_residual(p):
    """T_comp - T_PCIe of the two-step plan is within one block per axis.

    Step 2 balances the layer totals, so the continuous solution has zero
    residual and each floor moves it by less than one block on its own axis.
    """
    b, mem, alloc = _plan(p)
    assume(alloc is not None and alloc.act_remain > 0 and alloc.kv_remain > 0)
    tpb = p["tpb"]
    gb, lb = p["g"] * tpb, p["l"] * tpb
    t_pcie, t_comp = predicted_times(b, alloc.act_host, alloc.kv_host, p["gpu"], tpb)
    diff = t_comp - t_pcie
    lo, hi = -gb, lb
    # the intercept-and-block bound stated for the planner
    assert abs(diff) <= max(gb, lb) + p["cg"] + p["cl"] + 1e-12
    slack = 1e-9 * (abs(lo) + abs(hi)) + 1e-15
    assert lo - slack <= diff <= hi + slack


def test_plan_balances_exactly_without_intercepts():
    b = bundle(3e-7, 1e-7, 2e-3)
    mem = HostMemory(m_host=10 ** 7, s_weight=0, s_kv=200, s_act=100)
    alloc = plan_host_allocation(b, mem, 40, 16)
    t_pcie, t_comp = predicted_times(b, alloc.act_host, alloc.kv_host, 40, 16)
    assert abs(t_pcie - t_comp) <= 2 * 3e-7 * 16 + 1e-7 * 16


def test_plan_matches_exhaustive_oracle_on_opt_like_setup():
    rng = np.random.default_rng(11)
    for _ in range(10):
        g, l = rng.uniform(1e-7, 2e-6, 2)
        t_w = rng.uniform(1e-3, 2e-2)
        s_act = 7
        gpu = int(rng.integers(0, 50))
        b = bundle(g, l, t_w)
        step1 = initial_cache_allocation(b, gpu, 16)
        budget = (step1[0] + 2 * step1[1] + int(rng.integers(1000, 6000))) * s_act
        mem = HostMemory(budget, 0, 2 * s_act, s_act)
        alloc = plan_host_allocation(b, mem, gpu, 16)
        _, best = oracles.best_allocation((g, 0.0), (l, 0.0), t_w, s_act, 2 * s_act, budget,
                                          gpu, 16)
        assert any(abs(alloc.act_host - x) <= 1 and abs(alloc.kv_host - y) <= 1
                   for x, y in best), (alloc, best)


# -- next block kind --------------------------------------------------------------------------

def test_next_block_kind_worked_example():
    assert next_block_kind(5, 2, HostAllocation(3, 1)) is BlockKind.ACT


def test_degenerate_ratio_always_act():
    alloc = HostAllocation(7, 0)
    a = k = 0
    for _ in range(50):
        kind = next_block_kind(a, k, alloc)
        assert kind is BlockKind.ACT
        a += 1


def test_empty_allocation_rejected():
    with pytest.raises(InputError):
        next_block_kind(0, 0, HostAllocation(0, 0))


def test_gpu_act_folds_into_ratio():
    alloc = HostAllocation(0, 10)
    assert next_block_kind(0, 0, alloc) is BlockKind.KV
    assert next_block_kind(0, 0, alloc, act_gpu=10) is BlockKind.ACT


def test_tie_breaks_toward_act():
    # at (0, 0) with target 0.5 both choices miss by 0.5
    assert choose_kind(0, 0, 0.5) is BlockKind.ACT


@settings(max_examples=30, deadline=None)
@given(act=st.integers(0, 50), kv=st.integers(0, 50))
def test_running_ratio_converges(act, kv):
    assume(act + kv > 0)
    alloc = HostAllocation(act, kv)
    target = act / (act + kv)
    a = k = 0
    for _ in range(10_000):
        if next_block_kind(a, k, alloc) is BlockKind.ACT:
            a += 1
        else:
            k += 1
        # within one block of the target split at every step
        assert abs(a - target * (a + k)) <= 1.0


def test_next_block_kind_deterministic():
    alloc = HostAllocation(13, 29)
    seq = []
    for _ in range(2):
        a = k = 0
        run = []
        for _ in range(100):
            kind = next_block_kind(a, k, alloc)
            run.append(kind)
            a, k = (a + 1, k) if kind is BlockKind.ACT else (a, k + 1)
        seq.append(run)
    assert seq[0] == seq[1]


def test_host_memory_for_model_counts_all_layers():
    cfg = preset("opt-30b")
    mem = HostMemory.for_model(cfg, 1e12, 6e10)
    assert mem.s_kv == 16 * 2 * 7168 * 2 * 48 and mem.s_act * 2 == mem.s_kv


def test_allocation_rejects_negative_counts():
    with pytest.raises(InputError):
        HostAllocation(-1, 0)
