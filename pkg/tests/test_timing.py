import json
import math

import pytest
from hypothesis import assume, given, settings, strategies as st

from hybridkv.config import ModelConfig, preset
from hybridkv.errors import DegenerateInputError, InputError
from hybridkv.timing import (
    HardwareProfile,
    LinearTimeModel,
    TimingBundle,
    calibrate,
    fit_linear,
    invert,
    load_bundle,
    predict,
    read_samples_csv,
    sample_points,
    synthesize_samples,
    weight_bytes,
)

OPT30 = preset("opt-30b")


def test_fit_exact_line():
    m = fit_linear([(0, 0), (10, 10)])
    assert (m.slope, m.intercept, m.r_squared) == (1.0, 0.0, 1.0)


def test_fit_constant():
    m = fit_linear([(1, 5), (2, 5), (3, 5)])
    assert m.slope == 0.0 and m.intercept == pytest.approx(5.0)


def test_fit_rejects_identical_x():
    with pytest.raises(DegenerateInputError):
        fit_linear([(4, 1.0), (4, 2.0), (4, 3.0)])
    with pytest.raises(DegenerateInputError):
        fit_linear([(4, 1.0)])


def test_fit_clamps_negative_intercept_and_flags_it(caplog):
    m = fit_linear([(10, 0.0), (20, 10.0), (30, 20.0)])
    assert m.intercept == 0.0 and m.clamped
    assert "clamping" in caplog.text


@pytest.mark.parametrize("kind", ["kv_gen", "load_kv"])
def test_twenty_noisy_samples_fit_well(kind):
    m = fit_linear(synthesize_samples(HardwareProfile(), OPT30, kind, 20, seed=0))
    assert m.r_squared >= 0.99


@pytest.mark.parametrize("kind", ["kv_gen", "load_kv"])
def test_noiseless_samples_on_line(kind):
    prof = HardwareProfile(noise_std=0.0)
    samples = synthesize_samples(prof, OPT30, kind, 16)
    m = fit_linear(samples)
    exact = (4 * 7168 ** 2 / prof.effective_flops if kind == "kv_gen"
             else 2 * 7168 * 2 / prof.pcie_bandwidth)
    assert m.slope == pytest.approx(exact, rel=1e-9)
    assert m.r_squared == pytest.approx(1.0, abs=1e-12)


def test_double_bandwidth_halves_load_samples():
    a = synthesize_samples(HardwareProfile(pcie_bandwidth=25e9), OPT30, "load_kv", 8, seed=5)
    b = synthesize_samples(HardwareProfile(pcie_bandwidth=50e9), OPT30, "load_kv", 8, seed=5)
    for (na, ta), (nb, tb) in zip(a, b):
        assert na == nb and tb == pytest.approx(ta / 2, rel=1e-12)


def test_load_time_for_1024_tokens_hand_arithmetic():
    prof = HardwareProfile(noise_std=0.0)
    m = fit_linear(synthesize_samples(prof, OPT30, "load_kv", 16))
    assert m(1024) == pytest.approx(1024 * 28672 / 25e9, rel=1e-9)
    assert m(1024) == pytest.approx(1.17440512e-3, rel=1e-9)


def test_sampling_defaults_log_spaced():
    pts = sample_points(16)
    assert len(pts) == 16 and pts[0] == 64 and pts[-1] == 65536
    ratios = pts[1:] / pts[:-1]
    assert max(ratios) / min(ratios) < 1.1


def test_synthesize_rejects_bad_args():
    with pytest.raises(InputError):
        synthesize_samples(HardwareProfile(), OPT30, "kv_gen", 1)
    with pytest.raises(InputError):
        synthesize_samples(HardwareProfile(), OPT30, "attention", 4)


def test_eval_examples():
    m = LinearTimeModel(2.0, 3.0)
    assert predict(m, 0) == 3.0 and m(5) == 13.0
    with pytest.raises(InputError):
        m(-1)


def test_invert_examples():
    assert invert(LinearTimeModel(1.0, 0.0), 7.9) == 7
    assert invert(LinearTimeModel(3.0, 2.0), 2.0) == 0
    assert invert(LinearTimeModel(3.0, 2.0), 1.0) == 0
    with pytest.raises(InputError):
        invert(LinearTimeModel(0.0, 1.0), 5.0)


@settings(max_examples=300, deadline=None)
@given(slope=st.floats(1e-9, 1e3), intercept=st.floats(0, 1e2), t=st.floats(0, 1e6))
def test_invert_is_floor_inverse(slope, intercept, t):
    m = LinearTimeModel(slope, intercept)
    assume(t >= intercept and (t - intercept) / slope < 1e12)
    n = invert(m, t)
    assert m(n) <= t < m(n + 1)


@settings(max_examples=200, deadline=None)
@given(slope=st.floats(1e-6, 1e3), intercept=st.floats(0, 1e2), n=st.integers(0, 10 ** 7))
def test_invert_round_trip(slope, intercept, n):
    m = LinearTimeModel(slope, intercept)
    assert invert(m, m(n)) == n


@settings(max_examples=100, deadline=None)
@given(slope=st.floats(0, 1e3), intercept=st.floats(0, 1e2),
       a=st.integers(0, 10 ** 6), b=st.integers(0, 10 ** 6))
def test_eval_monotone(slope, intercept, a, b):
    m = LinearTimeModel(slope, intercept)
    lo, hi = sorted((a, b))
    assert m(lo) <= m(hi)


def test_weight_bytes_opt30b():
    per_layer, total = weight_bytes(OPT30)
    assert per_layer == 12 * 7168 ** 2 * 2 == 1_233_125_376
    # within 2% of 30e9 fp16 parameters
    assert total == pytest.approx(30e9 * 2, rel=0.02)


def test_weight_bytes_quadratic_in_d_and_zero_layers():
    a = ModelConfig(1, 64, 4)
    b = ModelConfig(1, 128, 4)
    assert weight_bytes(b)[0] == 4 * weight_bytes(a)[0]
    z = ModelConfig(0, 64, 4, vocab_size=100, max_seq=10)
    assert weight_bytes(z)[1] == (100 + 10) * 64 * 2


def test_calibrate_weight_load_time_is_analytic():
    prof = HardwareProfile()
    b = calibrate(prof, OPT30)
    assert b.t_load_w == b.s_weight_layer / prof.pcie_bandwidth


def test_bundle_json_round_trip(tmp_path):
    b = calibrate(HardwareProfile(), OPT30, seed=3)
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"bundle": b.to_dict()}))
    back = load_bundle(p)
    assert back.to_dict() == b.to_dict()
    with pytest.raises(InputError):
        TimingBundle.from_dict({"kv_gen": {"slope": 1, "intercept": 0}})


def test_csv_import_matches_in_memory_fit(tmp_path):
    prof = HardwareProfile()
    gen = synthesize_samples(prof, OPT30, "kv_gen", 12, seed=9)
    path = tmp_path / "gen.csv"
    path.write_text("n_tokens,seconds\n" + "".join(f"{n},{t!r}\n" for n, t in gen))
    read = read_samples_csv(path)
    assert read == [(float(n), t) for n, t in gen]
    assert calibrate(prof, OPT30, kv_gen_samples=read).to_dict() == \
        calibrate(prof, OPT30, kv_gen_samples=gen).to_dict()


def test_profile_validation():
    with pytest.raises(InputError):
        HardwareProfile(gpu_efficiency=1.5)
    with pytest.raises(InputError):
        HardwareProfile(pcie_bandwidth=0)
    with pytest.raises(InputError):
        HardwareProfile.from_dict({"bandwidth": 1})
    assert HardwareProfile.from_dict(HardwareProfile().to_dict()) == HardwareProfile()
