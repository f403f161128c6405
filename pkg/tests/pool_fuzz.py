"""Randomized operation driver for a ReuseStore, checking invariants after every step."""
from __future__ import annotations

from collections import Counter

import numpy as np

from gpureuse.core_model import GpuSpec, StatsTable, Requested
from gpureuse.errors import EvictPinned, InsufficientMemory, PoolExhausted
from gpureuse.kv_engine import KvEngine
from gpureuse.packing import KV, TENSOR
from gpureuse.reuse_store import ReuseStore

from conftest import make_model

OPS = ("place", "evict", "move", "kv_alloc", "kv_free", "load", "teardown", "evict_pinned")


def check_all(store: ReuseStore, pinned_before: dict):
    store.check_invariants()
    by_kind = Counter()
    for r in store.regions:
        by_kind[r.kind] += r.size
    free, tensors, kv = by_kind["free"], by_kind[TENSOR], by_kind[KV]
    assert free + tensors + kv == store.pool_size
    assert tensors == store.tensor_bytes() and kv == store.kv_bytes()
    assert free == store.free_bytes()
    for tid, off in pinned_before.items():
        e = store.tensor_map.get(tid)
        assert e is not None and e.offset == off, "pinned tensor moved or vanished"


def run_fuzz(seed: int, n_ops: int, pool_size: int = 4096) -> Counter:
    rng = np.random.default_rng(seed)
    store = ReuseStore(GpuSpec("g", pool_size))
    models = [make_model(f"m{i}", [int(s) for s in rng.integers(8, 96, size=rng.integers(2, 6))])
              for i in range(8)]
    stats = StatsTable()
    loose = []  # specs of free-standing tensors placed directly
    kv_blocks: list[int] = []
    next_block = 0
    counts: Counter = Counter()
    t = 0.0
    for step in range(n_ops):
        op = OPS[int(rng.integers(len(OPS)))]
        pinned_before = {tid: e.offset for tid, e in store.tensor_map.items() if e.model_id in store.pinned_models}
        if op == "place":
            size = int(rng.integers(1, 64))
            spec = make_model("loose", [size]).tensors[0]
            spec = type(spec)(type(spec.id)(spec.id.fingerprint ^ step), "loose", f"x{step}", size)
            off = store.regions.best_fit(size)
            if off is not None:
                store.place_tensor(spec, off, t)
                loose.append(spec)
        elif op == "evict" and store.tensor_map:
            ids = sorted(store.tensor_map)
            tid = ids[int(rng.integers(len(ids)))]
            if store.is_pinned(tid):
                try:
                    store.evict_tensor(tid)
                    raise AssertionError("evicted a pinned tensor")
                except EvictPinned:
                    pass
            else:
                store.evict_tensor(tid)
        elif op == "move" and store.tensor_map:
            ids = sorted(tid for tid in store.tensor_map if not store.is_pinned(tid))
            if ids:
                tid = ids[int(rng.integers(len(ids)))]
                e = store.tensor_map[tid]
                holes = [r for r in store.regions.free_regions() if r.size >= e.size
                         and (r.end <= e.offset or r.offset >= e.offset + e.size)]
                if holes:
                    h = holes[int(rng.integers(len(holes)))]
                    dest = h.offset + int(rng.integers(0, h.size - e.size + 1))
                    free0 = store.free_bytes()
                    store.move_tensor(tid, dest)
                    assert store.free_bytes() == free0
        elif op == "kv_alloc":
            off = store.alloc_kv_block(next_block, int(rng.integers(4, 32)))
            if off is not None:
                kv_blocks.append(off)
                next_block += 1
        elif op == "kv_free" and kv_blocks:
            store.free_kv_block(kv_blocks.pop(int(rng.integers(len(kv_blocks)))))
        elif op == "load":
            m = models[int(rng.integers(len(models)))]
            stats = stats.update(Requested(t, m.model_id))
            try:
                out = store.load_model(m, stats, t)
                assert out.bytes_transferred == sum(s.size for s in out.missed_tensors)
                assert len(out.hit_tensors) + len(out.missed_tensors) == len(m.tensors)
            except InsufficientMemory:
                pass
        elif op == "teardown":
            pinned = sorted(store.pinned_models)
            if pinned:
                store.unpin(pinned[int(rng.integers(len(pinned)))])
        elif op == "evict_pinned":
            pinned = sorted(store.pinned_models)
            if pinned:
                try:
                    store.evict_model(pinned[0])
                    raise AssertionError("evicted a pinned model")
                except EvictPinned:
                    pass
        counts[op] += 1
        t += 1.0
        if op == "teardown":
            pinned_before = {k: v for k, v in pinned_before.items() if store.is_pinned(k)}
        check_all(store, pinned_before)
    return counts


def run_kv_fuzz(seed: int, n_ops: int) -> Counter:
    """KvEngine driven with random token growth, releases and teardowns."""
    rng = np.random.default_rng(seed)
    store = ReuseStore(GpuSpec("g", 1 << 16))
    resident = make_model("cached", [int(s) for s in rng.integers(256, 2048, size=12)])
    store.load_model(resident)
    store.unpin("cached")
    eng = KvEngine(store, "active", bytes_per_token=8, block_size_tokens=16)
    tables = []
    counts: Counter = Counter()
    for step in range(n_ops):
        r = rng.random()
        if r < 0.2 or not tables:
            tables.append(eng.new_table(step))
            counts["new"] += 1
        elif r < 0.8:
            tb = tables[int(rng.integers(len(tables)))]
            try:
                eng.ensure_capacity(tb, tb.token_count + int(rng.integers(1, 40)), float(step))
            except PoolExhausted:
                counts["exhausted"] += 1
            counts["grow"] += 1
        elif r < 0.98:
            eng.release_request(tables.pop(int(rng.integers(len(tables)))))
            counts["release"] += 1
        else:
            eng.instance_teardown()
            tables.clear()
            assert store.kv_bytes() == 0
            counts["teardown"] += 1
        eng.check_invariants()
        store.check_invariants()
    return counts


def _kv_setup(seed: int):
    rng = np.random.default_rng(seed)
    pool = int(rng.integers(2048, 8192))
    store = ReuseStore(GpuSpec("g", pool))
    cached = make_model("cached", [int(s) for s in rng.integers(64, 512, size=int(rng.integers(1, 8)))])
    try:
        store.load_model(cached)
    except InsufficientMemory:
        pass
    store.unpin("cached")
    stats = StatsTable().update(Requested(0.0, "cached"))
    eng = KvEngine(store, "active", bytes_per_token=int(rng.integers(1, 4)),
                   block_size_tokens=int(rng.choice([8, 16, 32])), stats=stats)
    tables = []
    for i in range(int(rng.integers(1, 10))):
        tb = eng.new_table(i)
        try:
            eng.ensure_capacity(tb, int(rng.integers(1, 100)))
        except PoolExhausted:
            pass
        tables.append(tb)
    for tb in list(tables):
        if rng.random() < 0.3:
            eng.release_request(tb)
            tables.remove(tb)
    for i in range(int(rng.integers(1, 6))):
        tables.append(eng.new_table(100 + i))
    items = []
    want = {tb.request_id: tb.token_count for tb in tables}
    for _ in range(int(rng.integers(0, 20))):
        tb = tables[int(rng.integers(len(tables)))]
        want[tb.request_id] += int(rng.integers(0, 60))
        items.append((tb, want[tb.request_id]))
    return store, eng, items


def engine_state(eng: KvEngine) -> dict:
    return {
        "pool": eng.store.dump_json(),
        "tables": {rid: (list(t.lbn_to_pbn), t.token_count) for rid, t in sorted(eng.tables.items())},
        "free_list": list(eng.free_list),
        "address_table": dict(sorted(eng.address_table.items())),
        "next_pbn": eng._next_pbn,
    }


def batch_vs_sequential(seed: int) -> tuple[str, dict, dict]:
    """Run one random batch both ways on identical engines.

    Returns ``(outcome, batch_state, reference_state)`` where the reference is
    the sequential end state, or the untouched start state when the batch
    fails (batches are all-or-nothing).
    """
    _, eng_b, items_b = _kv_setup(seed)
    _, eng_s, items_s = _kv_setup(seed)
    before = engine_state(eng_b)
    try:
        calls0 = eng_b.pool_calls
        eng_b.batch_allocate(items_b)
        assert eng_b.pool_calls - calls0 <= 1
    except PoolExhausted:
        return "exhausted", engine_state(eng_b), before
    for tb, n in items_s:
        eng_s.ensure_capacity(tb, n)
    eng_b.check_invariants()
    return "ok", engine_state(eng_b), engine_state(eng_s)
