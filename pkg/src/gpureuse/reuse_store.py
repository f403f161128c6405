"""Per-GPU unified memory pool: an address-ordered region list plus a tensor map.

Regions tile ``[0, pool_size)`` exactly and adjacent free regions are merged
as soon as they appear. Tensors and KV blocks share the same region list.
One :class:`ReuseStore` is owned by one writer at a time; ``snapshot()`` and
``reuse_size()`` take the store lock so readers never see a half-applied plan.
"""
from __future__ import annotations

import bisect
import json
import threading
from dataclasses import dataclass, field
import numpy as np

from . import packing
from .core_model import GpuSpec, ModelSpec, StatsTable, TensorId, TensorSpec
from .errors import (DestinationOccupied, EvictPinned, Infeasible, InsufficientMemory,
                     NotFound, OverlapMove)
from .packing import FREE, KV, TENSOR, AllocationPlan, EvictionCandidate, Slot

DUMP_FORMAT_VERSION = 1


@dataclass(slots=True)
class Region:
    offset: int
    size: int
    kind: str = FREE
    ref: object = None

    @property
    def end(self) -> int:
        return self.offset + self.size

    @property
    def is_free(self) -> bool:
        return self.kind == FREE


class RegionList:
    def __init__(self, pool_size: int):
        self.pool_size = pool_size
        self._regions: list[Region] = [Region(0, pool_size)]
        self._starts: list[int] = [0]
        self._free: list[tuple[int, int]] = [(pool_size, 0)]

    def __iter__(self):
        return iter(self._regions)

    def copy(self) -> "RegionList":
        new = RegionList.__new__(RegionList)
        new.pool_size = self.pool_size
        new._regions = [Region(r.offset, r.size, r.kind, r.ref) for r in self._regions]
        new._starts = list(self._starts)
        new._free = list(self._free)
        return new

    def __len__(self):
        return len(self._regions)

    @property
    def regions(self) -> tuple[Region, ...]:
        return tuple(self._regions)

    def free_regions(self) -> list[Region]:
        return [r for r in self._regions if r.is_free]

    def free_bytes(self) -> int:
        return sum(size for size, _ in self._free)

    def largest_free(self) -> int:
        return self._free[-1][0] if self._free else 0

    def index_at(self, offset: int) -> int:
        i = bisect.bisect_left(self._starts, offset)
        if i == len(self._starts) or self._starts[i] != offset:
            raise NotFound(f"no region starts at offset {offset}")
        return i

    def index_containing(self, offset: int) -> int:
        if not 0 <= offset < self.pool_size:
            raise DestinationOccupied(f"offset {offset} outside pool")
        return bisect.bisect_right(self._starts, offset) - 1

    def _free_add(self, r: Region):
        bisect.insort(self._free, (r.size, r.offset))

    def _free_remove(self, r: Region):
        i = bisect.bisect_left(self._free, (r.size, r.offset))
        del self._free[i]

    def _replace(self, i: int, new: list[Region], n_old: int = 1):
        self._regions[i:i + n_old] = new
        self._starts[i:i + n_old] = [r.offset for r in new]

    def fits_free(self, offset: int, size: int) -> bool:
        if offset < 0 or size <= 0 or offset + size > self.pool_size:
            return False
        r = self._regions[self.index_containing(offset)]
        return r.is_free and offset + size <= r.end

    def carve(self, offset: int, size: int, kind: str, ref) -> Region:
        """Allocate ``[offset, offset+size)`` out of the free region holding it."""
        if size <= 0:
            raise ValueError("size must be positive")
        if offset < 0 or offset + size > self.pool_size:
            raise DestinationOccupied(f"extent [{offset}, {offset + size}) outside pool")
        i = self.index_containing(offset)
        r = self._regions[i]
        if not r.is_free or offset + size > r.end:
            raise DestinationOccupied(f"extent [{offset}, {offset + size}) is not inside one free region")
        self._free_remove(r)
        pieces = []
        if offset > r.offset:
            pieces.append(Region(r.offset, offset - r.offset))
        taken = Region(offset, size, kind, ref)
        pieces.append(taken)
        if offset + size < r.end:
            pieces.append(Region(offset + size, r.end - offset - size))
        for p in pieces:
            if p.is_free:
                self._free_add(p)
        self._replace(i, pieces)
        return taken

    def release(self, offset: int) -> Region:
        """Free the region starting at ``offset`` and merge it with free neighbours."""
        i = self.index_at(offset)
        r = self._regions[i]
        if r.is_free:
            raise NotFound(f"region at {offset} is already free")
        lo, hi = i, i + 1
        start, end = r.offset, r.end
        if i > 0 and self._regions[i - 1].is_free:
            lo = i - 1
            start = self._regions[lo].offset
            self._free_remove(self._regions[lo])
        if i + 1 < len(self._regions) and self._regions[i + 1].is_free:
            hi = i + 2
            end = self._regions[i + 1].end
            self._free_remove(self._regions[i + 1])
        merged = Region(start, end - start)
        self._free_add(merged)
        self._replace(lo, [merged], hi - lo)
        return merged

    def best_fit(self, size: int) -> int | None:
        i = bisect.bisect_left(self._free, (size, -1))
        if i == len(self._free):
            return None
        return self._free[i][1]

    def slots(self) -> list[Slot]:
        return [Slot(r.offset, r.size, r.kind, r.ref) for r in self._regions]

    def check(self):
        regs = self._regions
        assert regs, "empty region list"
        assert regs[0].offset == 0, "first region must start at 0"
        assert regs[-1].end == self.pool_size, "last region must end at pool_size"
        free = []
        prev_end, prev_free = 0, False
        for r in regs:
            assert r.size > 0, f"empty region {r}"
            assert r.offset == prev_end, f"gap/overlap at offset {r.offset}"
            is_free = r.kind == FREE
            assert not (is_free and prev_free), f"adjacent free regions at {r.offset}"
            if is_free:
                free.append((r.size, r.offset))
            prev_end, prev_free = r.end, is_free
        assert self._starts == [r.offset for r in regs], "start index out of sync"
        free.sort()
        assert self._free == free, "free index out of sync"


@dataclass(slots=True)
class TensorEntry:
    offset: int
    size: int
    model_id: str
    last_access: float


@dataclass
class LoadOutcome:
    hit_tensors: list[TensorId]
    missed_tensors: list[TensorSpec]
    bytes_transferred: int
    bytes_merged: int
    eviction_cost_total: float
    plan: AllocationPlan = field(default_factory=AllocationPlan)


def _copy_map(tmap: dict) -> dict:
    return {tid: TensorEntry(e.offset, e.size, e.model_id, e.last_access) for tid, e in tmap.items()}


def lookup(model: ModelSpec, tensor_map: dict) -> tuple[list[TensorId], list[TensorSpec]]:
    hits, misses = [], []
    for t in model.tensors:
        if t.id in tensor_map:
            hits.append(t.id)
        else:
            misses.append(t)
    return hits, misses


def reuse_size(model: ModelSpec, tensor_map: dict) -> int:
    return sum(t.size for t in model.tensors if t.id in tensor_map)


@dataclass(frozen=True)
class StoreSnapshot:
    gpu_id: str
    pool_size: int
    slots: tuple[Slot, ...]
    tensor_ids: frozenset
    pinned_models: frozenset
    free_bytes: int

    def reuse_size(self, model: ModelSpec) -> int:
        return sum(t.size for t in model.tensors if t.id in self.tensor_ids)


class ReuseStore:
    def __init__(self, gpu: GpuSpec, eviction: packing.EvictionPolicy = packing.EvictionPolicy.MIN_COST,
                 merge: packing.MergePolicy = packing.MergePolicy.PARTITIONED_GAIN,
                 rng: np.random.Generator | None = None, strict_packing: bool = False):
        self.gpu = gpu
        self.regions = RegionList(gpu.pool_size)
        self.tensor_map: dict[TensorId, TensorEntry] = {}
        self.pinned_models: set[str] = set()
        self.models: dict[str, ModelSpec] = {}
        self.eviction = packing.EvictionPolicy(eviction)
        self.merge = packing.MergePolicy(merge)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.strict_packing = strict_packing
        self.bytes_merged_total = 0
        self.bytes_transferred_total = 0
        self._lock = threading.RLock()

    @property
    def pool_size(self) -> int:
        return self.gpu.pool_size

    # -- queries --------------------------------------------------------------

    def lookup(self, model: ModelSpec):
        return lookup(model, self.tensor_map)

    def reuse_size(self, model: ModelSpec) -> int:
        with self._lock:
            return reuse_size(model, self.tensor_map)

    def free_bytes(self) -> int:
        return self.regions.free_bytes()

    def kv_bytes(self) -> int:
        return sum(r.size for r in self.regions if r.kind == KV)

    def tensor_bytes(self) -> int:
        return sum(e.size for e in self.tensor_map.values())

    def pinned_bytes(self) -> int:
        return sum(e.size for e in self.tensor_map.values() if e.model_id in self.pinned_models)

    def is_pinned(self, tid: TensorId) -> bool:
        e = self.tensor_map.get(tid)
        return e is not None and e.model_id in self.pinned_models

    def resident_models(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.tensor_map.values():
            out[e.model_id] = out.get(e.model_id, 0) + e.size
        return out

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return StoreSnapshot(self.gpu.gpu_id, self.pool_size, tuple(self.regions.slots()),
                                 frozenset(self.tensor_map), frozenset(self.pinned_models),
                                 self.regions.free_bytes())

    # -- pinning ----------------------------------------------------------------

    def pin(self, model_id: str):
        with self._lock:
            self.pinned_models.add(model_id)

    def unpin(self, model_id: str):
        with self._lock:
            self.pinned_models.discard(model_id)

    # -- primitive mutations --------------------------------------------------

    def place_tensor(self, spec: TensorSpec, offset: int, clock: float = 0.0):
        with self._lock:
            if spec.id in self.tensor_map:
                raise DestinationOccupied(f"tensor {spec.name} already resident")
            self.regions.carve(offset, spec.size, TENSOR, spec.id)
            self.tensor_map[spec.id] = TensorEntry(offset, spec.size, spec.model_id, clock)

    def evict_tensor(self, tid: TensorId) -> Region:
        with self._lock:
            entry = self.tensor_map.get(tid)
            if entry is None:
                raise NotFound(f"tensor {tid} not resident")
            if entry.model_id in self.pinned_models:
                raise EvictPinned(f"tensor {tid} belongs to active model {entry.model_id}")
            freed = self.regions.release(entry.offset)
            del self.tensor_map[tid]
            return freed

    def move_tensor(self, tid: TensorId, new_offset: int):
        """Relocate a tensor into disjoint free space."""
        with self._lock:
            entry = self.tensor_map.get(tid)
            if entry is None:
                raise NotFound(f"tensor {tid} not resident")
            if entry.model_id in self.pinned_models:
                raise EvictPinned(f"tensor {tid} is pinned")
            if new_offset < entry.offset + entry.size and entry.offset < new_offset + entry.size:
                raise OverlapMove(f"move of {tid} to {new_offset} overlaps its source")
            if not self.regions.fits_free(new_offset, entry.size):
                raise DestinationOccupied(f"no free extent of {entry.size} bytes at {new_offset}")
            self.regions.carve(new_offset, entry.size, TENSOR, tid)
            self.regions.release(entry.offset)
            entry.offset = new_offset
            self.bytes_merged_total += entry.size

    def _slide(self, tid: TensorId, new_offset: int):
        # memmove-style relocation used by plan compaction: the source is
        # vacated first, so the destination may overlap it
        entry = self.tensor_map[tid]
        self.regions.release(entry.offset)
        self.regions.carve(new_offset, entry.size, TENSOR, tid)
        entry.offset = new_offset
        self.bytes_merged_total += entry.size

    def alloc_kv_block(self, pbn: int, size: int) -> int | None:
        with self._lock:
            off = self.regions.best_fit(size)
            if off is None:
                return None
            self.regions.carve(off, size, KV, pbn)
            return off

    def carve_kv(self, offset: int, size: int, ref: int):
        with self._lock:
            self.regions.carve(offset, size, KV, ref)

    def free_kv_block(self, offset: int):
        with self._lock:
            r = self.regions.regions[self.regions.index_at(offset)]
            if r.kind != KV:
                raise NotFound(f"region at {offset} is not a KV block")
            self.regions.release(offset)

    # -- eviction costs ---------------------------------------------------------

    def eviction_candidates(self, stats: StatsTable | None, exclude_model: str | None = None
                            ) -> list[EvictionCandidate]:
        out = []
        for tid, e in self.tensor_map.items():
            if e.model_id in self.pinned_models or e.model_id == exclude_model:
                continue
            model = self.models.get(e.model_id)
            if stats is None:
                cost = 0.0
            else:
                bw = self.gpu.load_bandwidth(model.location) if model else self.gpu.pcie_bandwidth
                ms = stats.stats_for(e.model_id, bw)
                cost = packing.eviction_cost(e.size, ms, model.latency_sensitivity if model else 1.0)
            out.append(EvictionCandidate(tid, e.size, cost, e.size, e.last_access))
        return out

    # -- model loading ----------------------------------------------------------

    def register(self, model: ModelSpec):
        self.models[model.model_id] = model

    def can_host(self, model: ModelSpec) -> bool:
        return model.total_size <= self.pool_size - self.pinned_bytes() - self.kv_bytes()

    def apply_plan(self, plan: AllocationPlan, clock: float = 0.0):
        with self._lock:
            for tid in plan.evictions:
                self.evict_tensor(tid)
            for tid, off in plan.relocations:
                if self.is_pinned(tid):
                    raise EvictPinned(f"plan relocates pinned tensor {tid}")
                self._slide(tid, off)
            for spec, off in plan.placements:
                self.place_tensor(spec, off, clock)

    def load_model(self, model: ModelSpec, stats: StatsTable | None = None, clock: float = 0.0) -> LoadOutcome:
        """Make every tensor of ``model`` resident and pin the model."""
        with self._lock:
            self.register(model)
            hits, misses = self.lookup(model)
            plan = AllocationPlan()
            if misses:
                slots = self.regions.slots()
                movable = {tid for tid, e in self.tensor_map.items() if e.model_id not in self.pinned_models}
                candidates = self.eviction_candidates(stats, exclude_model=model.model_id)
                try:
                    plan = packing.plan_allocation(slots, misses, candidates, movable,
                                                   eviction=self.eviction, merge=self.merge,
                                                   rng=self.rng, strict=self.strict_packing)
                except Infeasible as exc:
                    raise InsufficientMemory(f"{model.model_id} on {self.gpu.gpu_id}: {exc}") from None
                self.apply_plan(plan, clock)
            for t in model.tensors:
                self.tensor_map[t.id].last_access = clock
            self.pin(model.model_id)
            transferred = sum(t.size for t in misses)
            self.bytes_transferred_total += transferred
            return LoadOutcome(hits, misses, transferred, plan.total_merge_cost,
                               plan.total_eviction_cost, plan)

    def evict_model(self, model_id: str) -> int:
        """Drop every tensor of an unpinned model; returns bytes freed."""
        with self._lock:
            ids = [tid for tid, e in self.tensor_map.items() if e.model_id == model_id]
            freed = 0
            for tid in ids:
                freed += self.tensor_map[tid].size
                self.evict_tensor(tid)
            return freed

    # -- state capture ----------------------------------------------------------

    def checkpoint(self):
        with self._lock:
            return (self.regions.copy(), _copy_map(self.tensor_map), set(self.pinned_models),
                    self.bytes_merged_total, self.bytes_transferred_total)

    def restore(self, state):
        with self._lock:
            regions, tmap, pinned, merged, transferred = state
            self.regions = regions.copy()
            self.tensor_map = _copy_map(tmap)
            self.pinned_models = set(pinned)
            self.bytes_merged_total = merged
            self.bytes_transferred_total = transferred

    def dump(self) -> dict:
        with self._lock:
            regions = []
            for r in self.regions:
                d = {"offset": r.offset, "size": r.size, "state": r.kind}
                if r.kind == TENSOR:
                    d["tensor"] = str(r.ref)
                elif r.kind == KV:
                    d["block"] = r.ref
                regions.append(d)
            tensors = {
                str(tid): {"offset": e.offset, "size": e.size, "model_id": e.model_id,
                           "last_access": e.last_access, "pinned": e.model_id in self.pinned_models}
                for tid, e in sorted(self.tensor_map.items())
            }
            return {"format_version": DUMP_FORMAT_VERSION, "gpu_id": self.gpu.gpu_id,
                    "pool_size": self.pool_size, "regions": regions, "tensor_map": tensors}

    def dump_json(self) -> str:
        return json.dumps(self.dump(), sort_keys=True, indent=1)

    def check_invariants(self):
        """Raise AssertionError if tiling, coalescing or the map<->region bijection breaks."""
        self.regions.check()
        n_tensor_regions = 0
        for r in self.regions:
            if r.kind == TENSOR:
                n_tensor_regions += 1
                e = self.tensor_map.get(r.ref)
                assert e is not None, f"region {r} has no tensor map entry"
                assert (r.offset, r.size) == (e.offset, e.size), f"tensor {r.ref} entry {e} vs region {r}"
        assert n_tensor_regions == len(self.tensor_map), "tensor map and regions disagree"
