"""Linear timing models for KV regeneration and KV loading, fit from samples.

Regression is done over token counts.  A fitted model is ``slope * n +
intercept`` seconds for one decoder layer.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from hybridkv.config import ModelConfig
from hybridkv.errors import DegenerateInputError, InputError
from hybridkv.numerics import flop_count

log = logging.getLogger(__name__)

GB = 1e9
GiB = 1024 ** 3


@dataclass(frozen=True)
class HardwareProfile:
    pcie_bandwidth: float = 25e9           # bytes/s, effective PCIe 4.0 x16
    gpu_throughput: float = 82.6e12        # flop/s, fp16 peak
    gpu_efficiency: float = 0.35
    host_mem: float = 882 * GB
    gpu_mem: float = 24 * GiB
    noise_std: float = 0.02
    full_duplex: bool = False

    def __post_init__(self):
        for name in ("pcie_bandwidth", "gpu_throughput", "gpu_efficiency", "host_mem", "gpu_mem"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.gpu_efficiency > 1:
            raise InputError("gpu_efficiency must be <= 1")
        if self.noise_std < 0:
            raise InputError("noise_std must be >= 0")

    @property
    def effective_flops(self) -> float:
        return self.gpu_throughput * self.gpu_efficiency

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "HardwareProfile":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown profile keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class LinearTimeModel:
    slope: float
    intercept: float
    r_squared: float = 1.0
    clamped: bool = False

    def __post_init__(self):
        if self.slope < 0 or self.intercept < 0:
            raise InputError("slope and intercept must be >= 0")

    def __call__(self, n_tokens: float) -> float:
        return predict(self, n_tokens)

    def invert(self, seconds: float) -> int:
        return invert(self, seconds)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r_squared}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearTimeModel":
        return cls(float(doc["slope"]), float(doc["intercept"]), float(doc.get("r2", 1.0)))


def predict(model: LinearTimeModel, n_tokens: float) -> float:
    if n_tokens < 0:
        raise InputError(f"negative token count {n_tokens}")
    return model.slope * n_tokens + model.intercept


def invert(model: LinearTimeModel, seconds: float) -> int:
    """Largest token count whose predicted time does not exceed ``seconds``."""
    if model.slope <= 0:
        raise InputError("cannot invert a model with zero slope")
    n = math.floor((seconds - model.intercept) / model.slope)
    # guard against the floor landing one past the budget through rounding
    while n > 0 and predict(model, n) > seconds:
        n -= 1
    while n >= 0 and predict(model, n + 1) <= seconds:
        n += 1
    return max(0, n)


def fit_linear(samples) -> LinearTimeModel:
    """Ordinary least squares over ``(n_tokens, seconds)`` pairs."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise DegenerateInputError("need at least two (n_tokens, seconds) samples")
    x, y = arr[:, 0], arr[:, 1]
    if np.ptp(x) == 0:
        raise DegenerateInputError("all samples share the same n_tokens")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    clamped = False
    if intercept < 0:
        log.warning("fitted intercept %.3g s is negative; clamping to 0", intercept)
        intercept, clamped = 0.0, True
    if slope < 0:
        log.warning("fitted slope %.3g s/token is negative; clamping to 0", slope)
        slope, clamped = 0.0, True
    return LinearTimeModel(max(slope, 0.0), intercept, min(r2, 1.0), clamped)


def kv_bytes_per_token(config: ModelConfig) -> int:
    """KV bytes of one token for one layer."""
    return 2 * config.hidden_dim * config.bytes_per_scalar


def sample_points(n_points: int, lo: int = 64, hi: int = 65536) -> np.ndarray:
    pts = np.unique(np.round(np.geomspace(lo, hi, n_points)).astype(int))
    if pts.size < n_points:
        pts = np.unique(np.linspace(lo, hi, n_points).round().astype(int))
    return pts


def synthesize_samples(profile: HardwareProfile, config: ModelConfig, kind: str,
                       n_points: int = 16, seed: int = 0, lo: int = 64,
                       hi: int = 65536) -> list[tuple[int, float]]:
    """Stand-in for on-device timing: analytic times with multiplicative noise."""
    if n_points < 2:
        raise InputError("n_points must be >= 2")
    ns = sample_points(n_points, lo, hi)
    if kind == "kv_gen":
        base = np.array([flop_count("kv_gen", config, int(n)) for n in ns], float) \
            / profile.effective_flops
    elif kind == "load_kv":
        base = ns * kv_bytes_per_token(config) / profile.pcie_bandwidth
    else:
        raise InputError(f"unknown sample kind {kind!r}")
    # separate noise streams per kind so the two fits are independent
    rng = np.random.default_rng([seed, 0 if kind == "kv_gen" else 1])
    eps = rng.normal(0.0, profile.noise_std, ns.size) if profile.noise_std else 0.0
    return [(int(n), float(t)) for n, t in zip(ns, base * (1.0 + eps))]


def weight_bytes(config: ModelConfig) -> tuple[int, int]:
    d, f = config.hidden_dim, config.ffn_dim
    per_layer = (4 * d * d + 2 * d * f) * config.bytes_per_scalar
    embedding = (config.vocab_size + config.max_seq) * d * config.bytes_per_scalar
    return per_layer, per_layer * config.num_layers + embedding


@dataclass(frozen=True)
class TimingBundle:
    t_kv_gen: LinearTimeModel
    t_load_kv: LinearTimeModel
    t_load_w: float
    s_weight_layer: int
    s_weight_total: int

    def to_dict(self) -> dict:
        return {
            "kv_gen": self.t_kv_gen.to_dict(),
            "load_kv": self.t_load_kv.to_dict(),
            "t_load_w": self.t_load_w,
            "s_weight_layer": self.s_weight_layer,
            "s_weight_total": self.s_weight_total,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TimingBundle":
        try:
            return cls(
                LinearTimeModel.from_dict(doc["kv_gen"]),
                LinearTimeModel.from_dict(doc["load_kv"]),
                float(doc["t_load_w"]),
                int(doc["s_weight_layer"]),
                int(doc.get("s_weight_total", 0)),
            )
        except KeyError as exc:
            raise InputError(f"timing bundle missing field {exc}") from None


def calibrate(profile: HardwareProfile, config: ModelConfig, n_points: int = 16,
              seed: int = 0, kv_gen_samples=None, load_kv_samples=None) -> TimingBundle:
    """Fit both timing models; measured samples, when given, replace synthetic ones."""
    if kv_gen_samples is None:
        kv_gen_samples = synthesize_samples(profile, config, "kv_gen", n_points, seed)
    if load_kv_samples is None:
        load_kv_samples = synthesize_samples(profile, config, "load_kv", n_points, seed)
    per_layer, total = weight_bytes(config)
    return TimingBundle(
        fit_linear(kv_gen_samples),
        fit_linear(load_kv_samples),
        per_layer / profile.pcie_bandwidth,
        per_layer,
        total,
    )


def read_samples_csv(path: str | Path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"n_tokens", "seconds"} <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns n_tokens, seconds")
        return [(float(row["n_tokens"]), float(row["seconds"])) for row in reader]


def load_bundle(path: str | Path) -> TimingBundle:
    with open(path) as fh:
        doc = json.load(fh)
    return TimingBundle.from_dict(doc.get("bundle", doc))
