"""GPU affinity-aware placement: send each queued model to the feasible GPU
with the shortest estimated load time given what is already resident."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core_model import GpuSpec, ModelSpec


@dataclass(frozen=True)
class GpuSnapshot:
    gpu: GpuSpec
    available: bool = True
    free_bytes: int = 0
    reuse_size_by_model: Mapping[str, int] = field(default_factory=dict)

    @property
    def gpu_id(self) -> str:
        return self.gpu.gpu_id


@dataclass
class ScheduleDecision:
    assignments: list[tuple[str, str]] = field(default_factory=list)
    deferred: list[str] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def estimate_load_time(model: ModelSpec, reuse_size: int, gpu: GpuSpec) -> float:
    if reuse_size > model.total_size:
        raise ValueError(f"reuse size {reuse_size} exceeds model size {model.total_size}")
    return (model.total_size - reuse_size) / gpu.load_bandwidth(model.location)


def min_kv_headroom(model: ModelSpec, batch_size: int = 1, block_size_tokens: int = 16) -> int:
    """One KV block per batch lane."""
    return batch_size * block_size_tokens * model.bytes_per_token


def can_run(model: ModelSpec, snapshot: GpuSnapshot, kv_headroom: int = 0) -> bool:
    return snapshot.available and snapshot.gpu.pool_size >= model.total_size + kv_headroom


def schedule(requests: Sequence[ModelSpec], snapshots: Sequence[GpuSnapshot],
             headroom: Mapping[str, int] | None = None,
             request_ids: Sequence[int] | None = None) -> ScheduleDecision:
    """Greedy in queue order; a chosen GPU leaves the pool for the rest of the pass.

    Ties on estimated time go to the lexicographically smallest gpu_id.
    """
    headroom = headroom or {}
    pool = sorted(snapshots, key=lambda s: s.gpu_id)
    decision = ScheduleDecision()
    for i, model in enumerate(requests):
        rid = request_ids[i] if request_ids is not None else i
        best, best_t = None, float("inf")
        candidates = {}
        for snap in pool:
            if not can_run(model, snap, headroom.get(model.model_id, 0)):
                continue
            t = estimate_load_time(model, snap.reuse_size_by_model.get(model.model_id, 0), snap.gpu)
            candidates[snap.gpu_id] = t
            if t < best_t:
                best, best_t = snap, t
        if best is None:
            decision.deferred.append(model.model_id)
        else:
            decision.assignments.append((model.model_id, best.gpu_id))
            pool.remove(best)
        decision.log.append({"request_id": rid, "model_id": model.model_id, "candidates": candidates,
                             "chosen": best.gpu_id if best else None, "deferred": best is None})
    return decision
