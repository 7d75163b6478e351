"""Command-line entry point: calibrate, plan, pack, simulate, sweep, verify-numerics.

Settings resolve in three layers: built-in defaults and model presets, then the
JSON document given by ``--config``, then explicit flags.  Every file written
carries a header recording the tool version, the seed and hashes of the inputs.
Failures exit nonzero with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from hybridkv import __version__
from hybridkv.allocation import GpuResidency, plan_host_allocation, predicted_times
from hybridkv.config import ModelConfig, load_model, model_from_dict, preset
from hybridkv.errors import CapacityError, ConfigError, InputError
from hybridkv.experiment import (
    GpuLayout,
    Setup,
    default_act_gpu,
    default_packer,
    grid,
    host_memory,
    plan_for_workload,
    rows_to_csv,
    sweep,
    workload_blocks,
)
from hybridkv.scheduler import PackerConfig, Request, cost_fb, form_minibatches, mean_fb
from hybridkv.sim import MODES, RequestSpec, simulate, traffic_report, write_trace
from hybridkv.timing import (
    HardwareProfile,
    TimingBundle,
    calibrate,
    read_samples_csv,
)
from hybridkv.numerics import DecoderWeights
from hybridkv.verify import check_equivalence, mutated_wk, random_model

log = logging.getLogger("hybridkv")

DEFAULT_MODES = ("hybrid", "kv_only", "act_only")
DEFAULT_BATCHES = (16, 32, 64, 128)
DEFAULT_PROMPTS = (128, 256, 512, 1024)


class VerificationFailed(Exception):
    pass


@dataclass
class ExperimentSpec:
    """Resolved settings for one invocation."""

    model: ModelConfig = field(default_factory=lambda: preset("opt-30b"))
    profile: HardwareProfile = field(default_factory=HardwareProfile)
    modes: list = field(default_factory=lambda: list(DEFAULT_MODES))
    batch_sizes: list = field(default_factory=lambda: list(DEFAULT_BATCHES))
    prompt_lens: list = field(default_factory=lambda: list(DEFAULT_PROMPTS))
    gen_len: int = 32
    recompute_ratios: list = field(default_factory=lambda: [0.5])
    seed: int = 0
    out: Path = Path("out")
    jobs: int = 1
    bundle_path: str | None = None
    inputs: dict = field(default_factory=dict)

    def validate(self):
        if not self.modes or not self.batch_sizes or not self.prompt_lens:
            raise ConfigError("modes, batch_sizes and prompt_lens must be nonempty")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; expected a subset of {list(MODES)}")
        if min(self.batch_sizes) < 1 or min(self.prompt_lens) < 1 or self.gen_len < 0:
            raise ConfigError("batch sizes and prompt lengths must be >= 1, gen_len >= 0")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _read_json(path, what: str) -> tuple[dict, str]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"{what} file not found: {p}") from None
    try:
        return json.loads(raw), _sha256(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None


def _hash_file(path) -> str:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return _sha256(p.read_bytes())


def resolve_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec()
    doc = {}
    if args.config:
        doc, digest = _read_json(args.config, "config")
        spec.inputs["config"] = digest
        known = {"model", "profile", "modes", "batch_sizes", "prompt_lens", "gen_len",
                 "recompute_ratios", "seed", "out", "jobs", "bundle"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
    if "model" in doc:
        m = doc["model"]
        spec.model = preset(m) if isinstance(m, str) else model_from_dict(m)
    if "profile" in doc:
        spec.profile = HardwareProfile.from_dict(doc["profile"])
    for key in ("modes", "batch_sizes", "prompt_lens", "recompute_ratios"):
        if key in doc:
            setattr(spec, key, list(doc[key]))
    for key in ("gen_len", "seed", "jobs"):
        if key in doc:
            setattr(spec, key, int(doc[key]))
    if "out" in doc:
        spec.out = Path(doc["out"])
    if "bundle" in doc:
        spec.bundle_path = doc["bundle"]

    # flags win over the config file
    if getattr(args, "model", None):
        spec.model = load_model(args.model)
    if args.profile:
        pdoc, digest = _read_json(args.profile, "profile")
        spec.inputs["profile"] = digest
        spec.profile = HardwareProfile.from_dict(pdoc)
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is not None:
        spec.out = Path(args.out)
    if args.jobs is not None:
        spec.jobs = args.jobs
    if getattr(args, "bundle", None):
        spec.bundle_path = args.bundle
    for flag, key in (("modes", "modes"), ("batch_sizes", "batch_sizes"),
                      ("prompt_lens", "prompt_lens"), ("ratios", "recompute_ratios")):
        val = getattr(args, flag, None)
        if val:
            setattr(spec, key, list(val))
    if getattr(args, "gen_len", None) is not None:
        spec.gen_len = args.gen_len
    spec.inputs["model"] = _sha256(_canonical(spec.model.to_dict()))
    spec.inputs["hardware_profile"] = _sha256(_canonical(spec.profile.to_dict()))
    spec.validate()
    return spec


def get_bundle(spec: ExperimentSpec) -> TimingBundle:
    if spec.bundle_path:
        doc, digest = _read_json(spec.bundle_path, "timing bundle")
        spec.inputs["bundle"] = digest
        return TimingBundle.from_dict(doc.get("bundle", doc))
    return calibrate(spec.profile, spec.model, seed=spec.seed)


def header(command: str, spec: ExperimentSpec) -> dict:
    return {"tool": "hybridkv", "version": __version__, "command": command, "seed": spec.seed,
            "inputs": dict(sorted(spec.inputs.items()))}


def write_json(spec: ExperimentSpec, name: str, doc: dict) -> Path:
    spec.out.mkdir(parents=True, exist_ok=True)
    path = spec.out / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return path


# -- commands -------------------------------------------------------------------------------


def cmd_calibrate(args, spec: ExperimentSpec) -> dict:
    kv_gen = load_kv = None
    if args.kv_gen_csv:
        spec.inputs["kv_gen_csv"] = _hash_file(args.kv_gen_csv)
        kv_gen = read_samples_csv(args.kv_gen_csv)
    if args.load_kv_csv:
        spec.inputs["load_kv_csv"] = _hash_file(args.load_kv_csv)
        load_kv = read_samples_csv(args.load_kv_csv)
    bundle = calibrate(spec.profile, spec.model, args.points, spec.seed, kv_gen, load_kv)
    doc = {"header": header("calibrate", spec), "model": spec.model.to_dict(),
           "profile": spec.profile.to_dict(), "bundle": bundle.to_dict()}
    path = write_json(spec, args.name, doc)
    return {"written": str(path), "bundle": bundle.to_dict()}


def cmd_plan(args, spec: ExperimentSpec) -> dict:
    bundle = get_bundle(spec)
    tpb = spec.model.tokens_per_block
    capacity = (args.act_gpu if args.act_gpu is not None
                else default_act_gpu(spec.model, spec.profile, bundle).act_gpu)
    if args.batch_size is not None:
        # size the plan to a concrete workload
        batch = [RequestSpec(args.prompt_len, spec.gen_len)] * args.batch_size
        alloc, gpu = plan_for_workload(spec.model, spec.profile, bundle, capacity,
                                       workload_blocks(spec.model, batch))
    else:
        gpu = GpuResidency(capacity)
        alloc = plan_host_allocation(bundle, host_memory(spec.model, spec.profile, bundle),
                                     gpu, tpb)
    mem = host_memory(spec.model, spec.profile, bundle)
    t_pcie, t_comp = predicted_times(bundle, alloc.act_host, alloc.kv_host, gpu.act_gpu, tpb)
    doc = {
        "header": header("plan", spec),
        "allocation": alloc.to_dict(),
        "act_gpu": gpu.act_gpu,
        "bytes": {"act_host": alloc.act_host * mem.s_act, "kv_host": alloc.kv_host * mem.s_kv,
                  "weights": mem.s_weight},
        "predicted": {"t_pcie": t_pcie, "t_computation": t_comp},
    }
    write_json(spec, "plan.json", doc)
    return doc


def read_requests_csv(path) -> list[Request]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"requests file not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "act_blocks", "kv_blocks"} <= set(reader.fieldnames):
            raise InputError(f"{p}: expected columns id, act_blocks, kv_blocks")
        try:
            return [Request(row["id"], int(row["act_blocks"]), int(row["kv_blocks"]))
                    for row in reader]
        except ValueError as exc:
            raise InputError(f"{p}: {exc}") from None


def cmd_pack(args, spec: ExperimentSpec) -> dict:
    bundle = get_bundle(spec)
    spec.inputs["requests"] = _hash_file(args.requests)
    reqs = read_requests_csv(args.requests)
    cfg = default_packer(spec.model)
    if args.act_max is not None or args.kv_max is not None:
        cfg = PackerConfig(args.act_max or cfg.act_max, args.kv_max or cfg.kv_max)
    tpb = spec.model.tokens_per_block
    batches = form_minibatches(reqs, cfg, bundle, tpb)
    doc = {
        "header": header("pack", spec),
        "packer": {"act_max": cfg.act_max, "kv_max": cfg.kv_max},
        "minibatches": [dict(b.to_dict(), fb=_num(cost_fb(b, bundle, tpb))) for b in batches],
        "mean_fb": _num(mean_fb(batches, bundle, tpb)) if batches else None,
    }
    write_json(spec, "pack.json", doc)
    return doc


def _num(x: float):
    # JSON has no infinity; keep the file strictly parseable
    return "inf" if x == float("inf") else x


def cmd_simulate(args, spec: ExperimentSpec) -> dict:
    bundle = get_bundle(spec)
    setup = Setup.build(spec.model, spec.profile, bundle, seed=spec.seed)
    cfg = setup.config(args.mode, args.batch_size, args.prompt_len, spec.gen_len,
                       args.ratio if args.mode == "token_recompute" else 0.0,
                       store_checkpoint_traffic=not args.no_stores,
                       full_duplex=args.full_duplex or spec.profile.full_duplex)
    metrics, events = simulate(cfg)
    spec.out.mkdir(parents=True, exist_ok=True)
    trace_path = spec.out / "trace.json"
    write_trace(events, trace_path)
    doc = {
        "header": header("simulate", spec),
        "mode": args.mode,
        "batch": args.batch_size,
        "prompt_len": args.prompt_len,
        "gen_len": spec.gen_len,
        "allocation": cfg.allocation.to_dict(),
        "act_gpu": cfg.act_gpu.act_gpu,
        "metrics": metrics.to_dict(),
        "traffic_report": traffic_report(metrics),
        "trace": str(trace_path),
    }
    write_json(spec, "metrics.json", doc)
    return doc


def cmd_sweep(args, spec: ExperimentSpec) -> dict:
    bundle = get_bundle(spec)
    setup = Setup.build(spec.model, spec.profile, bundle, seed=spec.seed)
    points = grid(spec.modes, spec.batch_sizes, spec.prompt_lens, spec.gen_len,
                  spec.recompute_ratios)
    rows = sweep(setup, points, spec.jobs)
    h = header("sweep", spec)
    lines = [f"# tool=hybridkv version={h['version']} seed={h['seed']}"]
    lines += [f"# input {k}={v}" for k, v in h["inputs"].items()]
    spec.out.mkdir(parents=True, exist_ok=True)
    path = spec.out / "sweep.csv"
    path.write_text("\n".join(lines) + "\n" + rows_to_csv(rows))
    failed = sum(r.error is not None for r in rows)
    return {"written": str(path), "points": len(rows), "failed": failed}


def cmd_verify(args, spec: ExperimentSpec) -> dict:
    seeds = range(spec.seed, spec.seed + args.num_seeds)
    worst, results = 0.0, []
    for s in seeds:
        cfg = random_model(s, args.max_layers, args.max_dim)
        weights = None
        recompute = None
        if args.mutate_wk:
            weights = DecoderWeights.generate(cfg, s)
            recompute = mutated_wk(weights, 0, s)
        rep = check_equivalence(cfg, seed=s, weights=weights, recompute_weights=recompute,
                                sources=("act",) if args.mutate_wk else ("kv", "act", "token"))
        worst = max(worst, rep.max_rel_error)
        results.append({"seed": s, "layers": cfg.num_layers, "hidden_dim": cfg.hidden_dim,
                        "max_rel_error": rep.max_rel_error, "pass": rep.passed(args.tol)})
    ok = all(r["pass"] for r in results)
    doc = {"header": header("verify-numerics", spec), "tolerance": args.tol,
           "max_rel_error": worst, "pass": ok, "runs": results}
    write_json(spec, "verify.json", doc)
    if not ok:
        raise VerificationFailed(f"max relative deviation {worst:.3e} exceeds {args.tol:g}")
    return {"pass": ok, "max_rel_error": worst, "seeds": len(results)}


# -- argument parsing -----------------------------------------------------------------------


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _strs(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment JSON document")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    common.add_argument("--profile", default=argparse.SUPPRESS, help="hardware profile JSON")
    common.add_argument("--model", default=argparse.SUPPRESS,
                        help="preset name (opt-6.7b, opt-13b, opt-30b, opt-66b) or model JSON")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="hybridkv", parents=[common],
                                description="KV/activation hybrid cache planner and simulator")
    p.add_argument("--version", action="version", version=f"hybridkv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="fit the timing models")
    c.add_argument("--points", type=int, default=16)
    c.add_argument("--kv-gen-csv", help="measured KV-generation samples (n_tokens, seconds)")
    c.add_argument("--load-kv-csv", help="measured KV-load samples (n_tokens, seconds)")
    c.add_argument("--name", default="bundle.json", help="output file name inside --out")
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("plan", parents=[common], help="split host memory between ACT and KV")
    c.add_argument("--bundle", help="timing bundle JSON (calibrated in memory if omitted)")
    c.add_argument("--act-gpu", type=int, help="GPU-resident ACT blocks per layer")
    c.add_argument("--batch-size", type=int, help="size the plan to this many requests")
    c.add_argument("--prompt-len", type=int, default=1024)
    c.add_argument("--gen-len", type=int)
    c.set_defaults(func=cmd_plan)

    c = sub.add_parser("pack", parents=[common], help="form mini-batches from a requests CSV")
    c.add_argument("requests", help="CSV with columns id, act_blocks, kv_blocks")
    c.add_argument("--bundle")
    c.add_argument("--act-max", type=int)
    c.add_argument("--kv-max", type=int)
    c.set_defaults(func=cmd_pack)

    c = sub.add_parser("simulate", parents=[common], help="simulate one workload")
    c.add_argument("--bundle")
    c.add_argument("--mode", choices=MODES, default="hybrid")
    c.add_argument("--batch-size", type=int, default=64)
    c.add_argument("--prompt-len", type=int, default=512)
    c.add_argument("--gen-len", type=int)
    c.add_argument("--ratio", type=float, default=0.5, help="token_recompute ratio")
    c.add_argument("--no-stores", action="store_true", help="drop new-token store traffic")
    c.add_argument("--full-duplex", action="store_true")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("sweep", parents=[common], help="simulate a grid of workloads to CSV")
    c.add_argument("--bundle")
    c.add_argument("--modes", type=_strs)
    c.add_argument("--batch-sizes", type=_ints)
    c.add_argument("--prompt-lens", type=_ints)
    c.add_argument("--gen-len", type=int)
    c.add_argument("--ratios", type=_floats, help="token_recompute ratios")
    c.set_defaults(func=cmd_sweep)

    c = sub.add_parser("verify-numerics", parents=[common],
                       help="check recompute equivalence on seeded toy models")
    c.add_argument("--num-seeds", type=int, default=10)
    c.add_argument("--max-layers", type=int, default=6)
    c.add_argument("--max-dim", type=int, default=64)
    c.add_argument("--tol", type=float, default=1e-10)
    c.add_argument("--mutate-wk", action="store_true", help="negative control: perturb W_K")
    c.set_defaults(func=cmd_verify)
    return p


def _error(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "filename", None)
    if path is None and isinstance(exc, FileNotFoundError) and ": " in str(exc):
        path = str(exc).rsplit(": ", 1)[1]
    if path is not None:
        doc["path"] = str(path)
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out", "jobs", "profile", "model", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve_spec(args)
        result = args.func(args, spec)
    except VerificationFailed as exc:
        return _error(exc, 1)
    except (InputError, ConfigError, CapacityError, OSError, ValueError, KeyError) as exc:
        return _error(exc, 2)
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
