"""Command line entry point: ``gpureuse {gen-trace,run,bench-packing,dump-pool}``.

Exit codes: 0 success, 1 bad configuration or I/O, 2 infeasible at runtime.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench
from .catalog import catalog_from_config, default_catalog, load_catalog
from .errors import ConfigError, Infeasible, InstanceTooLarge, InsufficientMemory, PoolExhausted
from .packing import EvictionPolicy, MergePolicy
from .simulator import Mode, RunMetrics, SimConfig, Simulation
from .workload import Locality, Trace, TraceSpec, generate_trace

CONFIG_FORMAT_VERSION = 1
DUMP_FORMAT_VERSION = 1

POLICIES = {
    "Rand+GM": (EvictionPolicy.RANDOM, MergePolicy.GLOBAL_MERGE),
    "MCE+GM": (EvictionPolicy.MIN_COST, MergePolicy.GLOBAL_MERGE),
    "MCE+PGP": (EvictionPolicy.MIN_COST, MergePolicy.PARTITIONED_GAIN),
}
KV_MODES = {"Prealloc": Mode.REUSE, "OnDemand": Mode.REUSE_ODKV}

SUMMARY_FIELDS = ["cell", "requests", "cold_starts", "mean_ttft", "p99_ttft", "mean_load_latency",
                  "load_per_request", "load_transfer", "load_merge", "total_bytes_transferred",
                  "total_bytes_merged", "mean_reusable_space", "kv_allocations"]


def write_atomic(path: str | Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- config -------------------------------------------------------------------


class Experiment:
    def __init__(self, doc: dict, base: Path):
        if doc.get("format_version") != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"config format_version must be {CONFIG_FORMAT_VERSION}")
        known = {"format_version", "catalog", "sim", "trace", "trace_file", "ablation", "output_dir"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cat = doc.get("catalog")
        if isinstance(cat, str):
            cat = str(base / cat)
        self.catalog = catalog_from_config(cat)
        self.sim = SimConfig.from_dict(doc.get("sim", {}))
        self.trace_file = str(base / doc["trace_file"]) if doc.get("trace_file") else None
        self.trace_spec = doc.get("trace", {})
        self.ablation = doc.get("ablation")
        self.output_dir = base / doc.get("output_dir", "out")

    @classmethod
    def load(cls, path: str | Path) -> "Experiment":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls(doc, path.parent)

    def trace(self) -> Trace:
        if self.trace_file:
            return Trace.load(self.trace_file)
        t = dict(self.trace_spec)
        try:
            spec = TraceSpec(catalog=self.catalog, locality=Locality(t.pop("locality", "L3")), **t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad trace section: {exc}") from None
        return generate_trace(spec)

    def cells(self) -> list[tuple[str, SimConfig]]:
        if not self.ablation:
            return [(self.sim.mode.value, self.sim)]
        base = self.sim.to_dict()
        out = []
        if "modes" in self.ablation:
            for m in self.ablation["modes"]:
                out.append((Mode(m).value, SimConfig.from_dict({**base, "mode": m})))
            return out
        policies = self.ablation.get("policies", ["MCE+PGP"])
        kvs = self.ablation.get("kv", ["OnDemand"])
        for p, kv in itertools.product(policies, kvs):
            if p not in POLICIES or kv not in KV_MODES:
                raise ConfigError(f"unknown ablation cell {p}/{kv}")
            ev, mg = POLICIES[p]
            cfg = SimConfig.from_dict({**base, "eviction": ev, "merge": mg, "mode": KV_MODES[kv]})
            out.append((f"{p}_{kv}", cfg))
        return out


def _run_cell(cfg: SimConfig, trace: Trace, catalog) -> RunMetrics:
    return Simulation(cfg, catalog).run(trace)


def _summary_row(cell: str, m: RunMetrics) -> list:
    a = m.aggregates()
    ph = a.get("phase_means", {})
    vals = {**a, "cell": cell, "load_transfer": ph.get("load_transfer", 0.0), "load_merge": ph.get("load_merge", 0.0)}
    return [vals.get(k, "") for k in SUMMARY_FIELDS]


def _alloc_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sim_time", "request_id", "blocks_allocated", "source"])
    for r in rows:
        w.writerow([r["sim_time"], r["request_id"], r["blocks_allocated"], r["source"]])
    return buf.getvalue()


# -- subcommands ----------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    catalog = load_catalog(args.catalog) if args.catalog else default_catalog()
    base = None
    if args.base_trace:
        try:
            base = [json.loads(l)["model"] for l in Path(args.base_trace).read_text().splitlines() if l.strip()]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read base trace: {exc}") from None
    spec = TraceSpec(seed=args.seed, num_requests=args.n, cv=args.cv, locality=Locality(args.locality),
                     mean_interarrival=args.mean_interarrival, catalog=catalog, base_sequence=base)
    write_atomic(args.out, generate_trace(spec).to_jsonl())
    return 0


def cmd_run(args) -> int:
    exp = Experiment.load(args.config)
    out_dir = Path(args.out_dir) if args.out_dir else exp.output_dir
    if args.trace:
        exp.trace_file = args.trace
    trace = exp.trace()
    cells = exp.cells()
    for _, cfg in cells:
        if args.emit_timeseries is not None:
            cfg.timeseries_interval = args.emit_timeseries
        cfg.log_kv_allocations = cfg.log_kv_allocations or args.log_kv
    if args.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_cell, [c for _, c in cells], itertools.repeat(trace),
                                    itertools.repeat(exp.catalog)))
    else:
        results = [_run_cell(c, trace, exp.catalog) for _, c in cells]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for (name, cfg), m in zip(cells, results):
        write_atomic(out_dir / f"metrics_{name}.json", m.to_json())
        write_atomic(out_dir / f"records_{name}.csv", m.records_csv())
        write_atomic(out_dir / f"schedule_{name}.jsonl",
                     "".join(json.dumps(r, sort_keys=True) + "\n" for r in m.scheduling_log))
        if cfg.log_kv_allocations:
            write_atomic(out_dir / f"kv_alloc_{name}.csv", _alloc_csv(m.alloc_log))
        w.writerow(_summary_row(name, m))
    write_atomic(out_dir / "summary.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_bench_packing(args) -> int:
    rows = bench.bench(args.count, args.seed, args.max_resident, args.max_new)
    text = bench.to_csv(rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    print(json.dumps(bench.summary(rows), sort_keys=True), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_dump_pool(args) -> int:
    exp = Experiment.load(args.config)
    if args.trace:
        exp.trace_file = args.trace
    sim = Simulation(exp.sim, exp.catalog)
    sim.run(exp.trace(), until=args.at)
    stores = [s for s in sim.stores if args.gpu is None or s.gpu.gpu_id == args.gpu]
    if not stores:
        raise ConfigError(f"no GPU named {args.gpu!r}")
    doc = {"format_version": DUMP_FORMAT_VERSION, "t": args.at, "pools": [s.dump() for s in stores]}
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpureuse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic request trace (JSONL)")
    g.add_argument("--cv", type=float, default=None, help="inter-arrival CV (default: from locality)")
    g.add_argument("--locality", choices=[l.value for l in Locality], default="L3")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mean-interarrival", type=float, default=2.0)
    g.add_argument("--catalog", help="catalog JSON (default: built-in 8 models)")
    g.add_argument("--base-trace", help="JSONL with a 'model' field per line to use as base sequence")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="simulate one config (or its ablation cells)")
    r.add_argument("--config", required=True)
    r.add_argument("--trace", help="trace JSONL overriding the config's trace section")
    r.add_argument("--out-dir")
    r.add_argument("--emit-timeseries", type=float, metavar="SECONDS",
                   help="sample pool utilization at this cadence")
    r.add_argument("--log-kv", action="store_true", help="write the per-step KV allocation log")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench-packing", help="heuristic vs exhaustive oracle on random instances")
    b.add_argument("--count", type=int, default=100)
    b.add_argument("--seed", type=int, default=7)
    b.add_argument("--max-resident", type=int, default=10)
    b.add_argument("--max-new", type=int, default=6)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_packing)

    d = sub.add_parser("dump-pool", help="run until a time and dump pool state")
    d.add_argument("--config", required=True)
    d.add_argument("--trace")
    d.add_argument("--at", type=float, required=True)
    d.add_argument("--gpu")
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_pool)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InstanceTooLarge, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (Infeasible, InsufficientMemory, PoolExhausted) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
