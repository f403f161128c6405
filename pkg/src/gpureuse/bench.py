"""Random small allocation instances and heuristic-vs-exhaustive comparison."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import packing
from .core_model import GB, MIB, TensorId
from .errors import Infeasible, InstanceTooLarge
from .packing import FREE, TENSOR, EvictionCandidate, Slot


@dataclass
class Instance:
    slots: list[Slot]
    new_sizes: list[int]
    costs: dict  # evictable tensor -> eviction cost (seconds)
    movable: set
    intra_bw: float = 400.0 * GB

    def candidates(self) -> list[EvictionCandidate]:
        sizes = {s.ref: s.size for s in self.slots if s.kind == TENSOR}
        return [EvictionCandidate(t, sizes[t], c, sizes[t], 0.0) for t, c in sorted(self.costs.items())]


@dataclass
class Comparison:
    instance_id: int
    heuristic_cost: float | None  # None: heuristic found no plan
    oracle_cost: float | None

    @property
    def gap(self) -> float | None:
        if self.heuristic_cost is None or self.oracle_cost is None:
            return None
        return self.heuristic_cost - self.oracle_cost


def random_instance(rng: np.random.Generator, max_resident: int = 10, max_new: int = 6,
                    pinned_prob: float = 0.15, unit: int = 64 * MIB, pcie: float = 24.0 * GB) -> Instance:
    if max_resident > packing.ORACLE_MAX_RESIDENT or max_new > packing.ORACLE_MAX_NEW:
        raise InstanceTooLarge(f"oracle handles at most {packing.ORACLE_MAX_RESIDENT} resident and "
                               f"{packing.ORACLE_MAX_NEW} new tensors")
    n_res = int(rng.integers(0, max_resident + 1))
    n_new = int(rng.integers(1, max_new + 1))
    slots, costs, movable = [], {}, set()
    off = 0
    for i in range(n_res):
        gap = int(rng.integers(0, 5)) * unit
        if gap:
            slots.append(Slot(off, gap))
            off += gap
        size = int(rng.integers(1, 9)) * unit
        tid = TensorId(i + 1)
        slots.append(Slot(off, size, TENSOR, tid))
        off += size
        if rng.random() >= pinned_prob:
            movable.add(tid)
            p = float(rng.random()) ** 3
            alpha = float(rng.uniform(0.1, 1.0))
            costs[tid] = p * (size / pcie) * alpha
    new_sizes = [int(rng.integers(1, 9)) * unit for _ in range(n_new)]
    tail = int(rng.integers(1, 5)) * unit
    # a load is only attempted when the pool minus pinned bytes can hold it
    pinned = sum(s.size for s in slots if s.kind == TENSOR and s.ref not in movable)
    tail = max(tail, sum(new_sizes) + pinned - off)
    slots.append(Slot(off, tail))
    return Instance(slots, new_sizes, costs, movable)


def heuristic_cost(inst: Instance, eviction=packing.EvictionPolicy.MIN_COST,
                   merge=packing.MergePolicy.PARTITIONED_GAIN, rng=None) -> float | None:
    try:
        plan = packing.plan_allocation(inst.slots, inst.new_sizes, inst.candidates(), inst.movable,
                                       eviction=eviction, merge=merge, rng=rng)
    except Infeasible:
        return None
    return plan.objective(inst.intra_bw)


def oracle_cost(inst: Instance) -> float | None:
    res = packing.brute_force_oracle(inst.new_sizes, inst.slots, inst.costs, inst.movable, inst.intra_bw)
    return None if res is None else res.objective


def bench(count: int, seed: int, max_resident: int = 10, max_new: int = 6) -> list[Comparison]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        inst = random_instance(rng, max_resident, max_new)
        out.append(Comparison(i, heuristic_cost(inst), oracle_cost(inst)))
    return out


def to_csv(rows: list[Comparison]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "heuristic_cost", "oracle_cost", "gap"])
    fmt = lambda v: "" if v is None else repr(float(v))
    for r in rows:
        w.writerow([r.instance_id, fmt(r.heuristic_cost), fmt(r.oracle_cost), fmt(r.gap)])
    return buf.getvalue()


def summary(rows: list[Comparison]) -> dict:
    gaps = [r.gap for r in rows if r.gap is not None]
    return {
        "instances": len(rows),
        "oracle_feasible": sum(r.oracle_cost is not None for r in rows),
        "heuristic_feasible": sum(r.heuristic_cost is not None for r in rows),
        "heuristic_missed": sum(r.oracle_cost is not None and r.heuristic_cost is None for r in rows),
        "below_oracle": sum(g < -1e-12 for g in gaps),
        "mean_gap": float(np.mean(gaps)) if gaps else 0.0,
        "max_gap": float(np.max(gaps)) if gaps else 0.0,
        "zero_gap": sum(abs(g) <= 1e-12 for g in gaps),
    }
