"""Two-stage allocation planner for loading new tensors into a fragmented pool.

Stage 1 picks tensors to evict (cheapest expected reload cost first) until the
pool has enough free bytes in total. Stage 2 decides which resident tensors to
relocate so that every new tensor lands in a contiguous hole, starting from
the "compact everything" plan and splitting the address range at resident
tensors that can stay put.

Planning is pure: it reads a snapshot of the pool layout and returns an
:class:`AllocationPlan` that :mod:`gpureuse.reuse_store` applies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core_model import ModelStats, TensorId, TensorSpec
from .errors import Infeasible, InstanceTooLarge

FREE = "free"
TENSOR = "tensor"
KV = "kv"


@dataclass(frozen=True)
class Slot:
    """One region of a pool snapshot."""

    offset: int
    size: int
    kind: str = FREE
    ref: object = None

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class EvictionCandidate:
    tensor: TensorId
    size: int
    cost: float
    merge_cost: int = 0
    last_access: float = 0.0

    def sort_key(self):
        # cost asc, then free more bytes per eviction, then least recently used
        return (self.cost, -self.size, self.last_access, self.tensor)


class EvictionPolicy(str, Enum):
    MIN_COST = "MinCost"
    RANDOM = "Random"


class MergePolicy(str, Enum):
    PARTITIONED_GAIN = "PartitionedGain"
    GLOBAL_MERGE = "GlobalMerge"


def eviction_cost(size: int, stats: ModelStats, sensitivity: float = 1.0) -> float:
    """Expected reload time lost by evicting ``size`` bytes of a model."""
    if stats.load_bandwidth <= 0:
        raise ValueError("load_bandwidth must be positive")
    return stats.miss_probability * (size / stats.load_bandwidth) * sensitivity


def minimal_cost_eviction(needed: int, candidates: Sequence[EvictionCandidate], free_now: int) -> list[TensorId]:
    if needed <= free_now:
        return []
    if free_now + sum(c.size for c in candidates) < needed:
        raise Infeasible(f"need {needed} bytes, only {free_now} free plus "
                         f"{sum(c.size for c in candidates)} evictable")
    chosen = []
    freed = free_now
    for cand in sorted(candidates, key=EvictionCandidate.sort_key):
        if freed >= needed:
            break
        chosen.append(cand.tensor)
        freed += cand.size
    return chosen


def random_eviction(needed: int, candidates: Sequence[EvictionCandidate], free_now: int,
                    rng: np.random.Generator) -> list[TensorId]:
    if needed <= free_now:
        return []
    if free_now + sum(c.size for c in candidates) < needed:
        raise Infeasible(f"need {needed} bytes, cannot free enough")
    ordered = sorted(candidates, key=lambda c: c.tensor)
    chosen = []
    freed = free_now
    for i in rng.permutation(len(ordered)):
        if freed >= needed:
            break
        chosen.append(ordered[i].tensor)
        freed += ordered[i].size
    return chosen


# --------------------------------------------------------------------------
# Subspaces and Partitioned-Gain Packing


def _size(t) -> int:
    return t if isinstance(t, (int, np.integer)) else t.size


@dataclass(frozen=True)
class Part:
    """A free region, or a maximal run of adjacent allocated regions.

    ``members`` holds ``(tensor_id, offset, size)`` for each tensor in the run
    and is empty for free parts.
    """

    offset: int
    size: int
    members: tuple = ()

    @property
    def free(self) -> bool:
        return not self.members

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Subspace:
    parts: tuple[Part, ...]
    capacity: int = field(init=False)
    max_merge_cost: int = field(init=False)

    def __post_init__(self):
        if not self.parts or not self.parts[0].free or not self.parts[-1].free:
            raise ValueError("a subspace must begin and end with a free region")
        object.__setattr__(self, "capacity", sum(p.size for p in self.parts if p.free))
        object.__setattr__(self, "max_merge_cost", sum(p.size for p in self.parts if not p.free))

    @property
    def start(self) -> int:
        return self.parts[0].offset

    @property
    def end(self) -> int:
        return self.parts[-1].end

    def partition_points(self) -> list[int]:
        """Indices of allocated parts, largest gain first (ties by address)."""
        idx = [i for i, p in enumerate(self.parts) if not p.free]
        return sorted(idx, key=lambda i: (-self.parts[i].size, self.parts[i].offset))

    def split(self, i: int) -> tuple["Subspace", "Subspace"]:
        return Subspace(self.parts[:i]), Subspace(self.parts[i + 1:])

    @classmethod
    def from_sizes(cls, layout: Iterable[tuple[str, int]], start: int = 0) -> "Subspace":
        """Build from ``[("F", 3), ("A", 1), ...]``; handy for tests and demos."""
        parts = []
        off = start
        for n, (kind, size) in enumerate(layout):
            if kind.upper().startswith("F"):
                parts.append(Part(off, size))
            else:
                parts.append(Part(off, size, ((TensorId(n), off, size),)))
            off += size
        return cls(tuple(parts))


class _Failure:
    def __repr__(self):
        return "FAILURE"

    def __bool__(self):
        return False


FAILURE = _Failure()


def try_packing(tensors: Sequence, p1: Subspace | int, p2: Subspace | int, strict: bool = False):
    """Split size-descending ``tensors`` between two subspaces.

    Each tensor goes to the side with the larger remaining capacity (ties to
    the first). Returns ``(t1, t2)`` lists or :data:`FAILURE` when a tensor
    does not fit the chosen side. With ``strict`` the literal guard
    ``size >= min(C1, C2)`` also fails, even when the larger side has room.
    """
    c1 = p1 if isinstance(p1, (int, np.integer)) else p1.capacity
    c2 = p2 if isinstance(p2, (int, np.integer)) else p2.capacity
    t1, t2 = [], []
    for t in tensors:
        s = _size(t)
        if strict and s >= min(c1, c2):
            return FAILURE
        if c1 >= c2:
            if s > c1:
                return FAILURE
            t1.append(t)
            c1 -= s
        else:
            if s > c2:
                return FAILURE
            t2.append(t)
            c2 -= s
    return t1, t2


@dataclass
class PackingResult:
    allocations: list[tuple[Subspace, list]]
    merge_cost: int
    initial_merge_cost: int
    gains: list[int]


def partitioned_gain_packing(tensors: Sequence, space: Subspace | Sequence[tuple[Subspace, list]],
                             strict: bool = False) -> PackingResult:
    """Recursively split subspaces at allocated runs while both halves can
    still host their share of the tensors.

    ``space`` is either one subspace (all tensors start there) or a list of
    initial ``(subspace, tensors)`` pairs. The returned ``merge_cost`` is the
    bytes that must be compacted: the starting total minus every accepted
    partition gain.
    """
    if isinstance(space, Subspace):
        if sum(_size(t) for t in tensors) > space.capacity:
            raise Infeasible("tensors exceed subspace capacity")
        pending = [(space, list(tensors))]
    else:
        pending = [(p, list(ts)) for p, ts in space]
    initial = sum(p.max_merge_cost for p, _ in pending)
    merge = initial
    gains: list[int] = []
    done: list[tuple[Subspace, list]] = []
    while pending:
        sub, ts = pending.pop(0)
        for i in sub.partition_points():
            left, right = sub.split(i)
            res = try_packing(ts, left, right, strict=strict)
            if res is not FAILURE:
                pending.append((left, res[0]))
                pending.append((right, res[1]))
                gain = sub.parts[i].size
                merge -= gain
                gains.append(gain)
                break
        else:
            done.append((sub, ts))
    done.sort(key=lambda pair: pair[0].start)
    return PackingResult(done, merge, initial, gains)


# --------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class AllocationPlan:
    evictions: tuple[TensorId, ...] = ()
    relocations: tuple[tuple[TensorId, int], ...] = ()
    placements: tuple[tuple[TensorSpec, int], ...] = ()
    total_eviction_cost: float = 0.0
    total_merge_cost: int = 0
    packing_merge_cost: int = 0

    @property
    def empty(self) -> bool:
        return not (self.evictions or self.relocations or self.placements)

    def placement_map(self) -> dict:
        return dict(self.placements)

    def merge_seconds(self, intra_copy_bandwidth: float) -> float:
        return self.total_merge_cost / intra_copy_bandwidth

    def objective(self, intra_copy_bandwidth: float) -> float:
        return self.total_eviction_cost + self.merge_seconds(intra_copy_bandwidth)


def _coalesce(slots: list[Slot]) -> list[Slot]:
    out: list[Slot] = []
    for s in slots:
        if out and s.kind == FREE and out[-1].kind == FREE:
            prev = out.pop()
            s = Slot(prev.offset, prev.size + s.size)
        out.append(s)
    return out


def _segments(slots: list[Slot], movable: set) -> list[Subspace]:
    """Cut the working extent into subspaces at runs that cannot move."""
    lo = next(i for i, s in enumerate(slots) if s.kind == FREE)
    hi = max(i for i, s in enumerate(slots) if s.kind == FREE)
    parts: list[Part] = []
    fixed: list[bool] = []
    run: list[Slot] = []

    def flush():
        if run:
            members = tuple((s.ref, s.offset, s.size) for s in run)
            parts.append(Part(run[0].offset, sum(s.size for s in run), members))
            fixed.append(any(s.kind != TENSOR or s.ref not in movable for s in run))
            run.clear()

    for s in slots[lo:hi + 1]:
        if s.kind == FREE:
            flush()
            parts.append(Part(s.offset, s.size))
            fixed.append(False)
        else:
            run.append(s)
    flush()

    out = []
    cur: list[Part] = []
    for p, f in zip(parts, fixed):
        if f:
            out.append(Subspace(tuple(cur)))
            cur = []
        else:
            cur.append(p)
    out.append(Subspace(tuple(cur)))
    return out


def _distribute(tensors: Sequence, subspaces: Sequence[Subspace]):
    """Spread tensors over independent subspaces: largest remainder first,
    falling back to best fit. Returns per-subspace lists or None."""
    caps = [s.capacity for s in subspaces]
    out: list[list] = [[] for _ in subspaces]
    for t in tensors:
        k = max(range(len(caps)), key=lambda i: (caps[i], -i))
        if _size(t) > caps[k]:
            break
        out[k].append(t)
        caps[k] -= _size(t)
    else:
        return out
    caps = [s.capacity for s in subspaces]
    out = [[] for _ in subspaces]
    for t in tensors:
        fits = [i for i in range(len(caps)) if caps[i] >= _size(t)]
        if not fits:
            return _exact_distribute(tensors, [s.capacity for s in subspaces])
        k = min(fits, key=lambda i: (caps[i], i))
        out[k].append(t)
        caps[k] -= _size(t)
    return out


def _exact_distribute(tensors: Sequence, caps: list[int], budget: int = 20000):
    """Backtracking bin assignment, used when both greedy passes fail.
    Gives up (None) after ``budget`` search nodes."""
    sizes = [_size(t) for t in tensors]
    order = sorted(range(len(sizes)), key=lambda i: -sizes[i])
    assign = [0] * len(sizes)
    dead: set = set()
    nodes = [0]

    def go(j: int, rem: list[int]) -> bool:
        if j == len(order):
            return True
        key = (j, tuple(rem))
        if key in dead or nodes[0] >= budget:
            return False
        nodes[0] += 1
        i = order[j]
        tried = set()
        for k, r in enumerate(rem):
            if r >= sizes[i] and r not in tried:
                tried.add(r)
                rem[k] -= sizes[i]
                assign[i] = k
                if go(j + 1, rem):
                    return True
                rem[k] += sizes[i]
        dead.add(key)
        return False

    if not go(0, list(caps)):
        return None
    out: list[list] = [[] for _ in caps]
    for i, t in enumerate(tensors):
        out[assign[i]].append(t)
    return out


def _realize(final: Iterable[tuple[Subspace, list]], compact_all: bool):
    relocations: list[tuple[TensorId, int]] = []
    placements: list[tuple[object, int]] = []
    merged = 0
    for sub, ts in final:
        cursor = sub.start
        if sub.max_merge_cost and (ts or compact_all):
            # slide every allocated run left in address order; the tail of the
            # subspace becomes one contiguous hole of size `capacity`
            for part in sub.parts:
                for tid, off, size in part.members:
                    if off != cursor:
                        relocations.append((tid, cursor))
                        merged += size
                    cursor += size
            cursor = sub.start + sub.max_merge_cost
            for t in ts:
                placements.append((t, cursor))
                cursor += _size(t)
        else:
            # no compaction needed: best-fit into the holes of the subspace
            holes = [[p.offset, p.size] for p in sub.parts if p.free]
            for t in ts:
                s = _size(t)
                fit = min((h for h in holes if h[1] >= s), key=lambda h: (h[1], h[0]), default=None)
                if fit is None:
                    raise Infeasible("subspace cannot host its tensors without merging")
                placements.append((t, fit[0]))
                fit[0] += s
                fit[1] -= s
    return relocations, placements, merged


def plan_allocation(slots: Sequence[Slot], new_tensors: Sequence, candidates: Sequence[EvictionCandidate],
                    movable: set, *, eviction: EvictionPolicy = EvictionPolicy.MIN_COST,
                    merge: MergePolicy = MergePolicy.PARTITIONED_GAIN,
                    rng: np.random.Generator | None = None, strict: bool = False) -> AllocationPlan:
    """Full two-stage plan over a pool snapshot.

    ``slots`` must tile the pool with no two adjacent free slots. ``movable``
    holds the tensor ids that Stage 2 may relocate; ``candidates`` the ones
    Stage 1 may evict.
    """
    tensors = sorted(new_tensors, key=lambda t: -_size(t))
    if not tensors:
        return AllocationPlan()
    needed = sum(_size(t) for t in tensors)
    free_now = sum(s.size for s in slots if s.kind == FREE)
    if eviction == EvictionPolicy.RANDOM:
        first = random_eviction(needed, candidates, free_now,
                                rng if rng is not None else np.random.default_rng(0))
        rest = sorted((c for c in candidates if c.tensor not in set(first)), key=lambda c: c.tensor)
        order = first + [c.tensor for c in rest]
    else:
        first = minimal_cost_eviction(needed, candidates, free_now)
        order = [c.tensor for c in sorted(candidates, key=EvictionCandidate.sort_key)]
    costs = {c.tensor: c.cost for c in candidates}

    # Stage 2 normally succeeds with the Stage 1 set; extra evictions are only
    # needed when immovable runs split the free space into unusable pieces.
    n_evict = len(first)
    while True:
        evicted = order[:n_evict]
        gone = set(evicted)
        view = _coalesce([Slot(s.offset, s.size) if s.kind == TENSOR and s.ref in gone else s for s in slots])
        segments = _segments(view, movable - gone)
        if len(segments) == 1:
            initial = [(segments[0], tensors)]
        else:
            spread = _distribute(tensors, segments)
            initial = None if spread is None else list(zip(segments, spread))
        if initial is not None:
            break
        if n_evict >= len(order):
            raise Infeasible("immovable regions fragment the pool beyond repair")
        n_evict += 1

    if merge == MergePolicy.GLOBAL_MERGE:
        final = initial
        packing_cost = sum(s.max_merge_cost for s, _ in initial)
        relocations, placements, merged = _realize(final, compact_all=True)
    else:
        res = partitioned_gain_packing(tensors, initial, strict=strict)
        packing_cost = res.merge_cost
        relocations, placements, merged = _realize(res.allocations, compact_all=False)
    return AllocationPlan(
        evictions=tuple(evicted),
        relocations=tuple(relocations),
        placements=tuple(placements),
        total_eviction_cost=float(sum(costs[t] for t in evicted)),
        total_merge_cost=merged,
        packing_merge_cost=packing_cost,
    )


# --------------------------------------------------------------------------
# Exhaustive oracle

ORACLE_MAX_RESIDENT = 10
ORACLE_MAX_NEW = 6


@dataclass(frozen=True)
class OracleResult:
    objective: float
    eviction_cost: float
    merge_bytes: int
    evictions: tuple = ()
    relocations: tuple = ()


def _bins_fit(items: list[int], holes: list[int]) -> bool:
    items = sorted(items, reverse=True)
    if not items:
        return True
    if sum(items) > sum(holes) or (holes and items[0] > max(holes)) or not holes:
        return False
    seen: set = set()

    def go(i: int, rem: tuple) -> bool:
        if i == len(items):
            return True
        key = (i, rem)
        if key in seen:
            return False
        tried = set()
        for k, r in enumerate(rem):
            if r >= items[i] and r not in tried:
                tried.add(r)
                nxt = tuple(sorted(rem[:k] + (r - items[i],) + rem[k + 1:], reverse=True))
                if go(i + 1, nxt):
                    return True
        seen.add(key)
        return False

    return go(0, tuple(sorted(holes, reverse=True)))


def brute_force_oracle(new_tensors: Sequence, slots: Sequence[Slot], evictable: dict,
                       movable: set, intra_copy_bandwidth: float) -> OracleResult | None:
    """Exact minimum of eviction cost + relocation time by enumeration.

    Every resident tensor either stays where it is, moves (if in
    ``movable``) or is evicted (if a key of ``evictable``, which maps tensor
    id to eviction cost). A choice is feasible when the new tensors plus the
    moved ones fit, as whole items, into the holes left between the tensors
    that stay. Returns None when nothing is feasible.
    """
    new_sizes = [_size(t) for t in new_tensors]
    residents = [s for s in slots if s.kind != FREE]
    choosable = [s for s in residents if s.kind == TENSOR and (s.ref in movable or s.ref in evictable)]
    pinned = [s for s in residents if s not in choosable]
    if len(choosable) > ORACLE_MAX_RESIDENT or len(new_sizes) > ORACLE_MAX_NEW:
        raise InstanceTooLarge(f"{len(choosable)} resident / {len(new_sizes)} new tensors exceeds oracle bounds")
    pool_end = max(s.end for s in slots)
    need_new = sum(new_sizes)
    fixed_bytes = sum(s.size for s in pinned)
    choosable.sort(key=lambda s: s.offset)
    best: list = [float("inf"), None]

    def holes_for(stay: list[Slot]) -> list[int]:
        taken = sorted(pinned + stay, key=lambda s: s.offset)
        out, cur = [], 0
        for s in taken:
            if s.offset > cur:
                out.append(s.offset - cur)
            cur = s.end
        if cur < pool_end:
            out.append(pool_end - cur)
        return out

    def go(i: int, cost: float, stay: list, moved: list, evicted: list, stay_bytes: int, moved_bytes: int):
        if cost >= best[0] - 1e-15:
            return
        # optimistic capacity: everything undecided gets evicted
        if need_new + moved_bytes > pool_end - fixed_bytes - stay_bytes:
            return
        if i == len(choosable):
            if _bins_fit(new_sizes + [s.size for s in moved], holes_for(stay)):
                best[0] = cost
                best[1] = (tuple(s.ref for s in evicted), tuple(s.ref for s in moved))
            return
        s = choosable[i]
        go(i + 1, cost, stay + [s], moved, evicted, stay_bytes + s.size, moved_bytes)
        if s.ref in evictable:
            go(i + 1, cost + evictable[s.ref], stay, moved, evicted + [s], stay_bytes, moved_bytes)
        if s.ref in movable:
            go(i + 1, cost + s.size / intra_copy_bandwidth, stay, moved + [s], evicted,
               stay_bytes, moved_bytes + s.size)

    go(0, 0.0, [], [], [], 0, 0)
    if best[1] is None:
        return None
    ev, mv = best[1]
    sizes = {s.ref: s.size for s in choosable}
    return OracleResult(
        objective=best[0],
        eviction_cost=float(sum(evictable[t] for t in ev)),
        merge_bytes=sum(sizes[t] for t in mv),
        evictions=ev,
        relocations=mv,
    )


def merge_only_oracle(new_tensors: Sequence, subspace: Subspace) -> int | None:
    """Fewest bytes to relocate so the tensors fit a subspace (no eviction)."""
    slots = []
    movable = set()
    for p in subspace.parts:
        if p.free:
            slots.append(Slot(p.offset, p.size))
        else:
            for tid, off, size in p.members:
                slots.append(Slot(off, size, TENSOR, tid))
                movable.add(tid)
    # shift so the subspace starts at 0 and ends at the pool boundary
    base = subspace.start
    slots = [Slot(s.offset - base, s.size, s.kind, s.ref) for s in slots]
    res = brute_force_oracle(new_tensors, slots, {}, movable, 1.0)
    return None if res is None else res.merge_bytes

