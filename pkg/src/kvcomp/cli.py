"""Command-line front end.

Exit codes: 0 ok, 2 argument/config error, 3 data/shape error, 4 evaluator failure.
Every command writes a ``*.manifest.json`` sidecar next to its primary output;
``kvcomp replay MANIFEST`` re-runs it and compares output digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .dse import (
    DEFAULT_OPTIONS,
    EvaluatorSpec,
    avg_pruning_ratio,
    genome_to_config,
    make_evaluator,
    run_nsga2,
    stage2_bitwidth_search,
)
from .errors import (
    EvaluatorError,
    FormatError,
    InfeasibleError,
    InvalidArgumentError,
    ShapeMismatchError,
)
from .quant import compress_trace, pack_block
from .sim import MODES, HardwareConfig, emit_report, load_hardware_config, load_report, simulate
from .sim.report import CSV_COLUMNS, report_row
from .trace import (
    CompressionConfig,
    LayerShape,
    generate_synthetic_trace,
    load_compression_config,
    read_trace,
    save_compression_config,
    write_trace,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_EVALUATOR = 0, 2, 3, 4


class UsageError(InvalidArgumentError):
    pass


class DataError(ShapeMismatchError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    params: dict
    inputs: dict = field(default_factory=dict)  # absolute path -> sha256
    outputs: dict = field(default_factory=dict)  # path relative to the output root -> sha256
    tool_version: str = __version__
    seed: int | None = None

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise UsageError(f"manifest {path} not found") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"malformed manifest {path}: {exc}") from None


# -- loading helpers ----------------------------------------------------------


def _load_trace(path):
    try:
        return read_trace(path)
    except FileNotFoundError:
        raise DataError(f"trace file {path} not found") from None


def _load_config(path):
    try:
        return load_compression_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _resolve_config(args, shape: LayerShape) -> CompressionConfig:
    if args.config:
        return _load_config(args.config)
    return CompressionConfig.uniform(shape.num_layers, args.threshold, args.bits)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


# -- commands -------------------------------------------------------------------
# each returns (input paths, output root, output files); main() writes the manifest


def cmd_gen_trace(args):
    shape = LayerShape(args.layers, args.heads, args.head_dim)
    trace = generate_synthetic_trace(
        shape, args.prefill, args.decode, args.seed, args.outlier_fraction, args.outlier_gain,
        base_std=args.base_std, key_std_scale=args.key_std_scale,
    )
    n = write_trace(trace, args.out)
    print(f"wrote {args.out}: {n} bytes, shape {shape.num_layers}x{shape.num_heads}x{shape.head_dim}, "
          f"{args.prefill}+{args.decode} tokens")
    return [], Path(args.out).parent, [Path(args.out).name]


def cmd_compress(args):
    trace = _load_trace(args.trace)
    cfg = _resolve_config(args, trace.shape)
    cfg.check_shape(trace.shape)
    comp = compress_trace(trace, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, layers = [], []
    total = 0
    for (layer, kv), s in sorted(comp.streams.items()):
        block = s.block()
        buf = pack_block(block)
        if len(buf) != block.packed_size():
            raise AssertionError("packed size disagrees with section accounting")
        name = f"L{layer:02d}_{'KV'[kv]}.ckv1"
        (out / name).write_bytes(buf)
        files.append(name)
        total += len(buf)
        sizes = block.section_sizes()
        counts = s.level_counts()
        layers.append({
            "layer": layer,
            "kv": "KV"[kv],
            "threshold": s.threshold,
            "bits": s.bits,
            "pruning_ratio": s.pruning_ratio(),
            "packed_bytes": len(buf),
            "sections": sizes,
            "payload_bytes": sizes["payload"],
            "levels_mean": float(counts.mean()),
            "levels_max": int(counts.max()),
        })
    raw = trace.data.size
    summary = {
        "trace": str(args.trace),
        "config": cfg.to_dict(),
        "avg_pruning_ratio": comp.avg_pruning_ratio(),
        "total_packed_bytes": total,
        "raw_int8_bytes": raw,
        "compression_ratio": raw / total,
        "streams": layers,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    files.append("summary.json")
    print(f"compressed {len(layers)} streams into {out}: {total} bytes vs {raw} raw "
          f"({raw / total:.2f}x), avg pruning ratio {summary['avg_pruning_ratio']:.4f}")
    inputs = [args.trace] + ([args.config] if args.config else [])
    return inputs, out, files


def cmd_simulate(args):
    trace = _load_trace(args.trace)
    cfg = _resolve_config(args, trace.shape)
    hw = load_hardware_config(args.hw) if args.hw else HardwareConfig.for_shape(trace.shape)
    modes = args.mode or ["cim+cpq"]
    if "all" in modes:
        modes = list(MODES)
    reports = []
    comp = None
    for mode in modes:
        if mode == "cim+cpq" and comp is None:
            cfg.check_shape(trace.shape)
            hw.check_shape(trace.shape)
            comp = compress_trace(trace, cfg)
        reports.append(simulate(trace, cfg, hw, mode, not args.no_icpi, not args.no_icpa, compressed=comp))
    if args.format == "json":
        if len(reports) == 1:
            data = emit_report(reports[0], "json")
        else:
            data = (json.dumps([r.to_dict() for r in reports], indent=2) + "\n").encode()
    else:
        data = _csv_bytes(CSV_COLUMNS, [report_row(r) for r in reports])
    Path(args.out).write_bytes(data)
    for r in reports:
        print(f"{r.mode:16s} bytes={r.total_bytes} ttft={r.ttft_cycles} cycles "
              f"tokens/s={r.tokens_per_s:.1f} tokens/J={r.tokens_per_j:.2f}")
        for msg in r.diagnostics:
            print(f"  warning: {msg}", file=sys.stderr)
    inputs = [args.trace] + [p for p in (args.config, args.hw) if p]
    return inputs, Path(args.out).parent, [Path(args.out).name]


def _front_rows(front, n_layers):
    header = [f"th_{kv}{i}" for i in range(n_layers) for kv in "kv"] + ["quality", "avg_pruning_ratio", "rank"]
    rows = sorted(([*ind.genome, repr(ind.fitness[0]), repr(ind.fitness[1]), ind.rank] for ind in front),
                  key=lambda r: r[:-3])
    return header, rows


def _pick_front_best(front, lossless_quality, tolerance):
    ok = [i for i in front if i.fitness[0] >= lossless_quality - tolerance]
    if ok:
        return max(ok, key=lambda i: (i.fitness[1], i.fitness[0], [-g for g in i.genome]))
    return max(front, key=lambda i: (i.fitness[0], i.fitness[1]))


def cmd_dse(args):
    if args.stage == "quant" and not args.stage1_config:
        raise UsageError("--stage quant needs --stage1-config")
    trace = _load_trace(args.trace)
    n = trace.shape.num_layers
    if args.evaluator == "external":
        if not args.eval_cmd:
            raise UsageError("--evaluator external needs --eval-cmd")
        spec = EvaluatorSpec("external", command=args.eval_cmd, timeout_s=args.eval_timeout)
    else:
        spec = EvaluatorSpec("reconstruction", trace=trace, quantize=True)
    quality = make_evaluator(spec)
    try:
        options = tuple(int(x) for x in args.options.split(","))
    except ValueError:
        raise UsageError(f"bad --options {args.options!r}") from None

    out_cfg = Path(args.out_config)
    files = [out_cfg.name]
    inputs = [args.trace]
    if args.stage in ("prune", "both"):
        prune_spec = spec if args.evaluator == "external" else EvaluatorSpec("reconstruction", trace=trace, quantize=False)
        prune_quality = make_evaluator(prune_spec)

        def fitness(genome):
            cfg = genome_to_config(genome, 8, 8, args.margin)
            return prune_quality(cfg), avg_pruning_ratio(trace, cfg)

        run = run_nsga2(args.pop, args.gens, [options] * (2 * n), fitness, args.seed)
        lossless = fitness((min(options),) * (2 * n))[0]
        best = _pick_front_best(run.front, lossless, args.prune_tolerance)
        cfg = genome_to_config(best.genome, 8, 8, args.margin)
        header, rows = _front_rows(run.front, n)
        front_csv = Path(args.front_csv) if args.front_csv else out_cfg.with_name(out_cfg.stem + "_front.csv")
        if front_csv.parent != out_cfg.parent:
            raise UsageError("--front-csv must be in the same directory as --out-config")
        front_csv.write_bytes(_csv_bytes(header, rows))
        files.append(front_csv.name)
        print(f"stage 1: {len(run.front)} front points from {run.evaluations} evaluations; "
              f"picked quality={best.fitness[0]:.6f} pruning ratio={best.fitness[1]:.4f}")
    else:
        cfg = _load_config(args.stage1_config)
        cfg.check_shape(trace.shape)
        inputs.append(args.stage1_config)
    if args.stage in ("quant", "both"):
        budget = math.inf if args.budget is None else args.budget
        res = stage2_bitwidth_search(cfg, quality, trace, quality_budget=budget,
                                     spread_factor=args.spread_factor, margin=cfg.hqe_margin)
        cfg = res.config
        print(f"stage 2: knee={res.knee_bits} sensitive={res.sensitive} bits_k={list(cfg.bits_k)} "
              f"bits_v={list(cfg.bits_v)} quality drop={res.baseline_quality - res.quality:.6f}")
    save_compression_config(cfg, out_cfg)
    return inputs, out_cfg.parent, files


_SHAPE_KEYS = ("num_layers", "num_heads", "head_dim", "prefill_len", "decode_len")
REPORT_COLUMNS = [
    "source", "mode", "icpi", "icpa", "total_bytes", "memory_reduction", "kv_bytes", "kv_reduction",
    "tokens_per_s", "throughput_gain", "tokens_per_j", "energy_efficiency_gain", "ttft_cycles", "ttft_speedup",
]


def _load_reports(path):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"report {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"report {path} is not valid JSON: {exc}") from None
    items = data if isinstance(data, list) else [data]
    try:
        return [load_report(json.dumps(d)) for d in items]
    except TypeError as exc:
        raise DataError(f"{path} is not a simulation report: {exc}") from None


def comparison_table(entries):
    """Rows comparing each (source, report) to the baseline-reload entry, or the first one."""
    shapes = {tuple(getattr(r, k) for k in _SHAPE_KEYS) for _, r in entries}
    if len(shapes) > 1:
        raise DataError(f"reports describe different workloads: {sorted(shapes)}")
    ref = next((r for _, r in entries if r.mode == "baseline-reload"), entries[0][1])

    def kv(r):
        b = r.bytes_by_category
        return b["kv-payload"] + b["index"] + b["label"] + b["quant-params"]

    rows = []
    for src, r in entries:
        rows.append([
            src, r.mode, r.icpi, r.icpa, r.total_bytes, ref.total_bytes / r.total_bytes, kv(r),
            kv(ref) / kv(r) if kv(r) else math.inf, r.tokens_per_s, r.tokens_per_s / ref.tokens_per_s,
            r.tokens_per_j, r.tokens_per_j / ref.tokens_per_j, r.ttft_cycles, r.ttft_speedup,
        ])
    return rows


def cmd_report(args):
    entries = []
    for path in args.inputs:
        entries += [(Path(path).name, r) for r in _load_reports(path)]
    if not entries:
        raise DataError("no reports given")
    rows = comparison_table(entries)
    if args.format == "json":
        data = (json.dumps([dict(zip(REPORT_COLUMNS, r)) for r in rows], indent=2) + "\n").encode()
    else:
        data = _csv_bytes(REPORT_COLUMNS, [[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    Path(args.out).write_bytes(data)
    for r in rows:
        print(f"{r[0]}:{r[1]:16s} memory x{r[5]:.2f} throughput x{r[9]:.2f} energy-eff x{r[11]:.2f}")
    return list(args.inputs), Path(args.out).parent, [Path(args.out).name]


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "compress": cmd_compress,
    "simulate": cmd_simulate,
    "dse": cmd_dse,
    "report": cmd_report,
}
# parameters naming output locations, rewritten on replay
OUTPUT_PARAMS = {
    "gen-trace": ("out",),
    "compress": ("out_dir",),
    "simulate": ("out",),
    "dse": ("out_config", "front_csv"),
    "report": ("out",),
}


def _manifest_path(command, params) -> Path:
    if command == "compress":
        return Path(params["out_dir"]) / "manifest.json"
    key = "out_config" if command == "dse" else "out"
    return Path(str(params[key]) + ".manifest.json")


def _absolutize(command, params):
    """Absolute paths so a manifest replays from any working directory."""
    path_keys = {"out", "out_dir", "out_config", "front_csv", "trace", "config", "hw", "stage1_config"}
    out = dict(params)
    for k in path_keys & set(out):
        if out[k]:
            out[k] = str(Path(out[k]).resolve())
    if command == "report":
        out["inputs"] = [str(Path(p).resolve()) for p in out["inputs"]]
    return out


def run_command(command, params) -> RunManifest:
    args = argparse.Namespace(**params)
    inputs, root, files = COMMANDS[command](args)
    return RunManifest(
        command=command,
        params=params,
        inputs={str(p): sha256_file(p) for p in inputs},
        outputs={f: sha256_file(Path(root) / f) for f in files},
        seed=params.get("seed"),
    )


def cmd_replay(args):
    m = RunManifest.read(args.manifest)
    if m.command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {m.command!r}")
    for path, digest in m.inputs.items():
        if not Path(path).exists():
            raise DataError(f"input {path} is missing")
        if sha256_file(path) != digest:
            raise DataError(f"input {path} changed since the recorded run")
    with tempfile.TemporaryDirectory(prefix="kvcomp-replay-") as tmp:
        params = dict(m.params)
        for key in OUTPUT_PARAMS[m.command]:
            if params.get(key):
                params[key] = str(Path(tmp) / Path(params[key]).name)
        if m.command == "compress":
            params["out_dir"] = str(Path(tmp) / "out")
        again = run_command(m.command, params)
    mismatched = sorted(k for k in set(m.outputs) | set(again.outputs) if m.outputs.get(k) != again.outputs.get(k))
    if mismatched:
        print(f"replay MISMATCH in {mismatched}")
        return EXIT_DATA
    print(f"replay OK: {len(again.outputs)} outputs identical")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvcomp", description="KV cache compression, accelerator model and DSE")
    p.add_argument("--version", action="version", version=f"kvcomp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a seeded synthetic KVT1 trace")
    g.add_argument("--layers", type=int, default=12)
    g.add_argument("--heads", type=int, default=12)
    g.add_argument("--head-dim", type=int, default=64)
    g.add_argument("--prefill", type=int, default=128)
    g.add_argument("--decode", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--outlier-fraction", type=float, default=0.0)
    g.add_argument("--outlier-gain", type=float, default=1.0)
    g.add_argument("--base-std", type=float, default=8.0)
    g.add_argument("--key-std-scale", type=float, default=1.0)
    g.add_argument("-o", "--out", required=True)

    def cfg_flags(sp):
        sp.add_argument("--config", help="CompressionConfig JSON; overrides --threshold/--bits")
        sp.add_argument("--threshold", type=int, default=0)
        sp.add_argument("--bits", type=int, default=8)

    c = sub.add_parser("compress", help="compress a trace into CKV1 blocks plus a summary")
    c.add_argument("trace")
    cfg_flags(c)
    c.add_argument("-o", "--out-dir", required=True)

    s = sub.add_parser("simulate", help="run the accelerator model")
    s.add_argument("trace")
    cfg_flags(s)
    s.add_argument("--hw", help="HardwareConfig JSON (default: derived from the trace shape)")
    s.add_argument("--mode", action="append", choices=list(MODES) + ["all"])
    s.add_argument("--no-icpi", action="store_true")
    s.add_argument("--no-icpa", action="store_true")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.add_argument("-o", "--out", required=True)

    d = sub.add_parser("dse", help="two-stage design-space exploration")
    d.add_argument("trace")
    d.add_argument("--stage", choices=["prune", "quant", "both"], default="both")
    d.add_argument("--stage1-config", help="pruning config for --stage quant")
    d.add_argument("--evaluator", choices=["reconstruction", "external"], default="reconstruction")
    d.add_argument("--eval-cmd", help="external evaluator command with {input} and {output} placeholders")
    d.add_argument("--eval-timeout", type=float, default=60.0)
    d.add_argument("--pop", type=int, default=20)
    d.add_argument("--gens", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--options", default=",".join(map(str, DEFAULT_OPTIONS)))
    d.add_argument("--prune-tolerance", type=float, default=0.02,
                   help="max quality loss vs no pruning when picking the stage-1 configuration")
    d.add_argument("--budget", type=float, help="max quality drop vs 8-bit in stage 2 (default unbounded)")
    d.add_argument("--spread-factor", type=float, default=2.0)
    d.add_argument("--margin", type=float, default=0.1)
    d.add_argument("-o", "--out-config", required=True)
    d.add_argument("--front-csv")

    r = sub.add_parser("report", help="compare simulation reports against the baseline")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--format", choices=["json", "csv"], default="csv")
    r.add_argument("-o", "--out", required=True)

    rp = sub.add_parser("replay", help="re-run a command from its manifest and compare digests")
    rp.add_argument("manifest")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        params = _absolutize(args.command, {k: v for k, v in vars(args).items() if k != "command"})
        manifest = run_command(args.command, params)
        manifest.write(_manifest_path(args.command, params))
        return EXIT_OK
    except EvaluatorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except (ShapeMismatchError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgumentError, InfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
