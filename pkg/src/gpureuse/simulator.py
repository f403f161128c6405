"""Deterministic discrete-event simulation of a serverless LLM cluster.

A controller queues requests and places cold starts with the affinity
scheduler; each GPU worker owns a :class:`ReuseStore` and hosts at most one
model instance. A cold start runs Init, Load, Profile, then each request
runs Prefill and Decode on one of the instance's batch lanes. Idle
instances linger for ``keep_alive`` seconds, or less when a queued request
needs their GPU.

A request that arrives while an instance of its model exists takes the warm
path: its whole wait counts as queueing. A request that had to wait for a
new instance has its wait split across the Init/Load/Profile intervals it
overlaps, the rest being queueing. Either way ``ttft`` equals
``queued_time + t_init + t_load + t_profile + t_prefill``.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import scheduler
from .core_model import GB, GpuSpec, InferenceRequest, ModelSpec, Requested, StatsTable
from .errors import ConfigError, Infeasible, InsufficientMemory, PoolExhausted
from .kv_engine import BLOCK_SIZES, KvBlockTable, KvEngine
from .packing import EvictionPolicy, MergePolicy
from .reuse_store import ReuseStore
from .workload import Trace

METRICS_FORMAT_VERSION = 1


class Mode(str, Enum):
    BASELINE = "Baseline"
    REUSE = "Reuse"
    REUSE_ODKV = "ReuseOdkv"


def default_gpus(n: int = 1, pool_size: int = 45 * GB) -> list[GpuSpec]:
    return [GpuSpec(f"gpu{i}", pool_size) for i in range(n)]


@dataclass
class SimConfig:
    gpus: list[GpuSpec] = field(default_factory=default_gpus)
    init_latency: float = 0.5
    profile_latency: float = 0.2
    prefill_base: float = 0.1
    prefill_per_token: float = 0.0005
    keep_alive: float = 240.0
    batch_size: int = 4
    mode: Mode = Mode.REUSE_ODKV
    eviction: EvictionPolicy = EvictionPolicy.MIN_COST
    merge: MergePolicy = MergePolicy.PARTITIONED_GAIN
    rpc_snapshot_latency: float = 0.002  # per worker, per scheduling pass
    block_size_tokens: int = 16
    max_seq_len: int = 4096
    kv_alloc_overhead: float = 50e-6
    stats_window: int = 256
    stats_decay: float = 0.95
    decode_rates: dict = field(default_factory=dict)  # model_id -> tokens/s override
    timeseries_interval: float | None = None
    log_kv_allocations: bool = False
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.eviction = EvictionPolicy(self.eviction)
        self.merge = MergePolicy(self.merge)
        self.validate()

    def validate(self):
        if not self.gpus:
            raise ConfigError("at least one GPU is required")
        if len({g.gpu_id for g in self.gpus}) != len(self.gpus):
            raise ConfigError("gpu ids must be unique")
        lat = (self.init_latency, self.profile_latency, self.prefill_base, self.prefill_per_token,
               self.keep_alive, self.rpc_snapshot_latency, self.kv_alloc_overhead)
        if min(lat) < 0:
            raise ConfigError("latencies must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.block_size_tokens not in BLOCK_SIZES:
            raise ConfigError(f"block_size_tokens must be one of {BLOCK_SIZES}")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.timeseries_interval is not None and self.timeseries_interval <= 0:
            raise ConfigError("timeseries_interval must be positive")

    @property
    def on_demand_kv(self) -> bool:
        return self.mode == Mode.REUSE_ODKV

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["eviction"] = self.eviction.value
        d["merge"] = self.merge.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        try:
            if "gpus" in d:
                d["gpus"] = [GpuSpec(**g) for g in d["gpus"]]
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad simulator config: {exc}") from None


@dataclass
class RequestRecord:
    request_id: int
    model_id: str
    gpu_id: str
    cold: bool
    t_arrival: float
    t_scheduled: float
    t_init: float
    t_load: float
    t_profile: float
    t_prefill: float
    ttft: float
    queued_time: float
    bytes_transferred: int
    bytes_merged: int
    t_load_merge: float
    t_finish: float
    kv_allocations: int
    reusable_space: int
    pool_used: int
    pool_size: int


@dataclass
class RunMetrics:
    records: list[RequestRecord]
    config: dict = field(default_factory=dict)
    timeseries: list[dict] = field(default_factory=list)
    scheduling_log: list[dict] = field(default_factory=list)
    alloc_log: list[dict] = field(default_factory=list)

    def aggregates(self) -> dict:
        recs = self.records
        if not recs:
            return {"requests": 0}
        ttft = np.array([r.ttft for r in recs])
        return {
            "requests": len(recs),
            "cold_starts": sum(r.cold for r in recs),
            "mean_ttft": float(ttft.mean()),
            "p99_ttft": float(np.percentile(ttft, 99)),
            "mean_load_latency": float(np.mean([r.t_load for r in recs if r.cold] or [0.0])),
            # each instance load counted once, spread over all requests
            "load_per_request": float(sum(r.t_load for r in recs if r.cold) / len(recs)),
            "total_bytes_transferred": int(sum(r.bytes_transferred for r in recs)),
            "total_bytes_merged": int(sum(r.bytes_merged for r in recs)),
            "mean_pool_utilization": float(np.mean([r.pool_used / r.pool_size for r in recs])),
            "mean_reusable_space": float(np.mean([r.reusable_space for r in recs])),
            "kv_allocations": int(sum(r.kv_allocations for r in recs)),
            "phase_means": {
                "queued": float(np.mean([r.queued_time for r in recs])),
                "init": float(np.mean([r.t_init for r in recs])),
                "load": float(np.mean([r.t_load for r in recs])),
                "load_merge": float(np.mean([r.t_load_merge for r in recs])),
                "load_transfer": float(np.mean([r.t_load - r.t_load_merge for r in recs])),
                "profile": float(np.mean([r.t_profile for r in recs])),
                "prefill": float(np.mean([r.t_prefill for r in recs])),
            },
        }

    def reusable_space_series(self) -> list[int]:
        return [r.reusable_space for r in sorted(self.records, key=lambda r: r.request_id)]

    def to_dict(self) -> dict:
        return {"format_version": METRICS_FORMAT_VERSION, "config": self.config,
                "aggregates": self.aggregates(), "records": [asdict(r) for r in self.records],
                "timeseries": self.timeseries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def records_csv(self) -> str:
        buf = io.StringIO()
        names = list(RequestRecord.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([getattr(r, n) for n in names])
        return buf.getvalue()


# --------------------------------------------------------------------------


@dataclass
class _Instance:
    iid: int
    model: ModelSpec
    gpu: int
    engine: KvEngine
    phases: tuple[float, float, float, float]  # init start, load start, profile start, ready
    bytes_transferred: int
    bytes_merged: int
    merge_seconds: float
    ready: bool = False
    active: dict = field(default_factory=dict)
    waiting: deque = field(default_factory=deque)
    stalled: list = field(default_factory=list)
    idle_epoch: int = 0
    idle_since: float | None = None
    first_request: int | None = None


@dataclass
class _Running:
    req: InferenceRequest
    inst: _Instance
    table: KvBlockTable | None
    prefill_end: float
    rate: float
    overhead: float = 0.0
    allocations: int = 0
    record: RequestRecord | None = None


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


class Simulation:
    def __init__(self, config: SimConfig, catalog: Sequence[ModelSpec]):
        self.cfg = config
        self.catalog = {m.model_id: m for m in catalog}
        rng = np.random.default_rng(config.seed)
        self.stores = [ReuseStore(g, config.eviction, config.merge,
                                  rng=np.random.default_rng(rng.integers(2**63)))
                       for g in config.gpus]
        for st in self.stores:
            for m in catalog:
                st.register(m)
        self.stats = StatsTable(config.stats_window, config.stats_decay)
        self.gpu_instance: list[_Instance | None] = [None] * len(config.gpus)
        self.by_model: dict[str, _Instance] = {}
        self.queue: list[InferenceRequest] = []
        self.events: list = []
        self._seq = 0
        self._iid = 0
        self.now = 0.0
        self.records: dict[int, RequestRecord] = {}
        self.sched_log: list[dict] = []
        self.timeseries: list[dict] = []
        self.alloc_log: list[dict] = []
        self._warm: set[int] = set()
        self._next_sample = 0.0

    # -- event plumbing ---------------------------------------------------------

    def _push(self, t: float, kind: str, *payload):
        heapq.heappush(self.events, (t, self._seq, kind, payload))
        self._seq += 1

    def _sample(self, t: float):
        while self.cfg.timeseries_interval is not None and self._next_sample <= t:
            for st in self.stores:
                self.timeseries.append({
                    "t": self._next_sample, "gpu_id": st.gpu.gpu_id,
                    "tensor_bytes": st.tensor_bytes(), "kv_bytes": st.kv_bytes(),
                    "utilization": (st.tensor_bytes() + st.kv_bytes()) / st.pool_size})
            self._next_sample += self.cfg.timeseries_interval

    def run(self, trace: Trace, until: float | None = None) -> RunMetrics:
        """Replay ``trace``. With ``until`` set, stop before the first event
        later than that time and leave pool state as it was then."""
        max_pool = max(g.pool_size for g in self.cfg.gpus)
        for r in trace.requests:
            m = self.catalog.get(r.model_id)
            if m is None:
                raise ConfigError(f"trace names unknown model {r.model_id!r}")
            if m.total_size + self._headroom(m) > max_pool:
                raise Infeasible(f"{m.model_id} does not fit on any GPU")
            self._push(r.arrival_time, "arrival", r)
        while self.events:
            if until is not None and self.events[0][0] > until:
                break
            t, _, kind, payload = heapq.heappop(self.events)
            self._sample(t)
            self.now = t
            getattr(self, "_on_" + kind)(*payload)
        if self.queue and not self.events:
            raise Infeasible(f"{len(self.queue)} requests never scheduled")
        recs = [self.records[k] for k in sorted(self.records)]
        for inst in self.gpu_instance:
            if inst is not None:
                self._collect_alloc_log(inst)
        self.alloc_log.sort(key=lambda a: (a["sim_time"], a["request_id"]))
        return RunMetrics(recs, self.cfg.to_dict(), self.timeseries, self.sched_log, self.alloc_log)

    def _collect_alloc_log(self, inst: _Instance):
        self.alloc_log.extend(asdict(a) for a in inst.engine.alloc_log)
        inst.engine.alloc_log.clear()

    # -- controller ---------------------------------------------------------------

    def _headroom(self, m: ModelSpec) -> int:
        return scheduler.min_kv_headroom(m, self.cfg.batch_size, self.cfg.block_size_tokens)

    def _on_arrival(self, req: InferenceRequest):
        self.stats = self.stats.update(Requested(req.arrival_time, req.model_id))
        inst = self.by_model.get(req.model_id)
        if inst is not None:
            self._warm.add(req.request_id)
            inst.waiting.append(req)
            if inst.ready:
                self._admit(inst)
            return
        self.queue.append(req)
        self._schedule_pass()

    def _snapshots(self, models: list[ModelSpec]) -> list[scheduler.GpuSnapshot]:
        out = []
        for i, st in enumerate(self.stores):
            out.append(scheduler.GpuSnapshot(
                st.gpu, self.gpu_instance[i] is None, st.free_bytes(),
                {m.model_id: st.reuse_size(m) for m in models}))
        return out

    def _schedule_pass(self):
        while self.queue:
            seen: dict[str, int] = {}
            for r in self.queue:
                seen.setdefault(r.model_id, r.request_id)
            models = [self.catalog[m] for m in seen]
            dec = scheduler.schedule(models, self._snapshots(models),
                                     {m.model_id: self._headroom(m) for m in models},
                                     request_ids=list(seen.values()))
            for rec in dec.log:
                rec["t"] = self.now
            self.sched_log.extend(dec.log)
            gpu_index = {g.gpu_id: i for i, g in enumerate(self.cfg.gpus)}
            failed = False
            for model_id, gpu_id in dec.assignments:
                failed |= not self._start_instance(self.catalog[model_id], gpu_index[gpu_id])
            if not (dec.deferred or failed):
                return
            idle = [inst for inst in self.gpu_instance if inst is not None and inst.idle_since is not None]
            if not idle:
                return
            victim = min(idle, key=lambda x: (x.idle_since, x.gpu))
            self._terminate(victim)

    def _start_instance(self, model: ModelSpec, gpu: int) -> bool:
        cfg = self.cfg
        store = self.stores[gpu]
        try:
            outcome = store.load_model(model, self.stats, self.now)
        except InsufficientMemory:
            return False
        engine = KvEngine(store, model.model_id, model.bytes_per_token, cfg.block_size_tokens, self.stats,
                          log_allocations=cfg.log_kv_allocations)
        if not cfg.on_demand_kv:
            engine.reserve(cfg.batch_size * math.ceil(cfg.max_seq_len / cfg.block_size_tokens))
        bw = store.gpu.load_bandwidth(model.location)
        merge_s = outcome.bytes_merged / store.gpu.intra_copy_bandwidth
        t_load = outcome.bytes_transferred / bw + merge_s
        t0 = self.now + cfg.rpc_snapshot_latency * len(cfg.gpus)
        t1 = t0 + cfg.init_latency
        t2 = t1 + t_load
        t3 = t2 + cfg.profile_latency
        self._iid += 1
        inst = _Instance(self._iid, model, gpu, engine, (t0, t1, t2, t3),
                         outcome.bytes_transferred, outcome.bytes_merged, merge_s)
        self.gpu_instance[gpu] = inst
        self.by_model[model.model_id] = inst
        keep = []
        for r in self.queue:
            (inst.waiting if r.model_id == model.model_id else keep).append(r)
        self.queue = keep
        inst.first_request = inst.waiting[0].request_id
        self._push(t3, "ready", inst)
        return True

    def _terminate(self, inst: _Instance):
        self._collect_alloc_log(inst)
        inst.engine.instance_teardown()
        store = self.stores[inst.gpu]
        if self.cfg.mode == Mode.BASELINE:
            for model_id in list(store.resident_models()):
                store.evict_model(model_id)
        self.gpu_instance[inst.gpu] = None
        del self.by_model[inst.model.model_id]
        inst.idle_epoch += 1

    # -- instance lifecycle -----------------------------------------------------

    def _on_ready(self, inst: _Instance):
        inst.ready = True
        self._admit(inst)

    def _admit(self, inst: _Instance):
        free = self.cfg.batch_size - len(inst.active) - len(inst.stalled)
        batch = []
        while free > 0 and inst.waiting:
            batch.append(inst.waiting.popleft())
            free -= 1
        if not batch:
            return
        inst.idle_since = None
        inst.idle_epoch += 1
        tables: list[KvBlockTable | None] = [None] * len(batch)
        allocs = [0] * len(batch)
        if self.cfg.on_demand_kv:
            tables = [inst.engine.new_table(r.request_id) for r in batch]
            items = [(tb, r.prompt_tokens + 1) for tb, r in zip(tables, batch)]
            try:
                got = inst.engine.batch_allocate(items, self.now)
            except PoolExhausted:
                # fall back to one at a time; the rest wait for a lane to drain
                got = []
                for k, (tb, n) in enumerate(items):
                    try:
                        got.append(inst.engine.ensure_capacity(tb, n, self.now))
                    except PoolExhausted:
                        for tb2, r2 in zip(tables[k:], batch[k:]):
                            inst.engine.tables.pop(tb2.request_id, None)
                        inst.waiting.extendleft(reversed(batch[k:]))
                        batch, tables = batch[:k], tables[:k]
                        break
                if not batch and not inst.active:
                    raise Infeasible(f"{inst.model.model_id}: KV for one request exceeds the pool")
            allocs = [1 if g else 0 for g in got]
        for r, tb, n_alloc in zip(batch, tables, allocs):
            self._start_request(inst, r, tb, n_alloc)

    def _start_request(self, inst: _Instance, req: InferenceRequest, table, n_alloc: int):
        cfg = self.cfg
        store = self.stores[inst.gpu]
        ovh = n_alloc * cfg.kv_alloc_overhead
        t_prefill = cfg.prefill_base + cfg.prefill_per_token * req.prompt_tokens + ovh
        start = self.now
        a = req.arrival_time
        s0, s1, s2, s3 = inst.phases
        if req.request_id in self._warm:
            s0 = s1 = s2 = s3 = start
        t_init = _overlap(a, start, s0, s1)
        t_load = _overlap(a, start, s1, s2)
        t_profile = _overlap(a, start, s2, s3)
        load_span = s2 - s1
        t_merge = t_load * (inst.merge_seconds / load_span) if load_span > 0 else 0.0
        queued = max(0.0, (start - a) - t_init - t_load - t_profile)
        first = inst.first_request == req.request_id
        rec = RequestRecord(
            req.request_id, req.model_id, store.gpu.gpu_id, first, a,
            start if req.request_id in self._warm else inst.phases[0],
            t_init, t_load, t_profile, t_prefill, queued + t_init + t_load + t_profile + t_prefill, queued,
            inst.bytes_transferred if first else 0, inst.bytes_merged if first else 0, t_merge,
            0.0, n_alloc, store.pool_size - store.kv_bytes(),
            store.tensor_bytes() + store.kv_bytes(), store.pool_size)
        self.records[req.request_id] = rec
        rate = cfg.decode_rates.get(req.model_id, inst.model.decode_rate)
        run = _Running(req, inst, table, start + t_prefill, rate, 0.0, n_alloc, rec)
        inst.active[req.request_id] = run
        self._schedule_next(run)

    def _next_boundary(self, run: _Running) -> int | None:
        if run.table is None:
            return None
        bs = self.cfg.block_size_tokens
        covered = len(run.table.lbn_to_pbn) * bs
        final = run.req.prompt_tokens + run.req.output_tokens
        return covered + 1 if covered < final else None

    def _schedule_next(self, run: _Running):
        c = self._next_boundary(run)
        if c is not None:
            # token c exists once (c - prompt - 1) decode steps have run
            steps = c - run.req.prompt_tokens - 1
            self._push(run.prefill_end + steps / run.rate + run.overhead, "boundary", run, c)
        else:
            self._push(run.prefill_end + run.req.output_tokens / run.rate + run.overhead, "finish", run)

    def _on_boundary(self, run: _Running, c: int):
        expected = run.prefill_end + (c - run.req.prompt_tokens - 1) / run.rate + run.overhead
        try:
            got = run.inst.engine.ensure_capacity(run.table, c, self.now)
        except PoolExhausted:
            if len(run.inst.active) <= 1:
                raise Infeasible(f"{run.req.model_id}: KV for one request exceeds the pool") from None
            run.inst.active.pop(run.req.request_id)
            run.inst.stalled.append((run, c, self.now))
            return
        if got:
            run.allocations += 1
            run.overhead += self.cfg.kv_alloc_overhead
        run.overhead += max(0.0, self.now - expected)
        self._schedule_next(run)

    def _on_finish(self, run: _Running):
        inst = run.inst
        inst.active.pop(run.req.request_id)
        run.record.t_finish = self.now
        run.record.kv_allocations = run.allocations
        if run.table is not None:
            inst.engine.release_request(run.table)
        stalled, inst.stalled = inst.stalled, []
        for r, c, since in stalled:
            inst.active[r.req.request_id] = r
            r.overhead += self.now - since
            self._push(self.now, "boundary", r, c)
        self._admit(inst)
        if not inst.active and not inst.waiting and not inst.stalled:
            inst.idle_since = self.now
            inst.idle_epoch += 1
            self._push(self.now + self.cfg.keep_alive, "idle_timeout", inst, inst.idle_epoch)
            if self.queue:
                self._schedule_pass()

    def _on_idle_timeout(self, inst: _Instance, epoch: int):
        if inst.idle_epoch != epoch or self.gpu_instance[inst.gpu] is not inst:
            return
        self._terminate(inst)
        self._schedule_pass()


def run(config: SimConfig, trace: Trace, catalog: Sequence[ModelSpec]) -> RunMetrics:
    return Simulation(config, catalog).run(trace)
