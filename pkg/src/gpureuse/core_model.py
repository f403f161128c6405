"""Domain types shared across the package: tensors, models, GPUs, requests.

Units are fixed everywhere: sizes in bytes (int), times in seconds (float),
bandwidths in bytes/second.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .errors import ConfigError, OrderingError

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB
GB = 10**9

DTYPE_BYTES = {"f32": 4, "f16": 2, "bf16": 2, "i8": 1, "u8": 1, "f8": 1}

_SEP = "\x1f"


@dataclass(frozen=True, order=True)
class TensorId:
    fingerprint: int

    def __str__(self) -> str:
        return f"{self.fingerprint:032x}"

    @classmethod
    def parse(cls, text: str) -> "TensorId":
        return cls(int(text, 16))


def fingerprint(model_id: str, name: str, shape: Sequence[int], element_type: str) -> TensorId:
    """128-bit digest of the canonical (model, name, shape, dtype) tuple.

    Fields are UTF-8 joined by 0x1F with dimensions in decimal, so the value
    is stable across processes (no hash salting).
    """
    if not model_id or not name:
        raise ValueError("model_id and name must be non-empty")
    canon = _SEP.join([model_id, name, ",".join(str(int(d)) for d in shape), element_type])
    digest = hashlib.blake2b(canon.encode("utf-8"), digest_size=16).digest()
    return TensorId(int.from_bytes(digest, "big"))


@dataclass(frozen=True)
class TensorSpec:
    id: TensorId
    model_id: str
    name: str
    size: int
    shape: tuple[int, ...] = ()
    dtype: str = "f16"

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"tensor {self.name!r} has non-positive size {self.size}")

    @classmethod
    def create(cls, model_id: str, name: str, shape: Sequence[int], dtype: str = "f16") -> "TensorSpec":
        numel = 1
        for d in shape:
            numel *= int(d)
        return cls(fingerprint(model_id, name, shape, dtype), model_id, name,
                   numel * DTYPE_BYTES[dtype], tuple(int(d) for d in shape), dtype)


class Location(str, Enum):
    MODEL_CACHE = "ModelCache"
    MODEL_STORE = "ModelStore"


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    tensors: tuple[TensorSpec, ...]
    latency_sensitivity: float = 1.0
    location: Location = Location.MODEL_CACHE
    bytes_per_token: int = 0
    decode_rate: float = 500.0
    total_size: int = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.latency_sensitivity <= 1.0:
            raise ConfigError(f"{self.model_id}: latency_sensitivity must lie in (0, 1]")
        ordered = tuple(sorted(self.tensors, key=lambda t: t.name))
        if any(t.model_id != self.model_id for t in ordered):
            raise ConfigError(f"{self.model_id}: tensor belongs to another model")
        object.__setattr__(self, "tensors", ordered)
        object.__setattr__(self, "total_size", sum(t.size for t in ordered))


@dataclass(frozen=True)
class GpuSpec:
    gpu_id: str
    pool_size: int
    pcie_bandwidth: float = 24.0 * GB
    intra_copy_bandwidth: float = 400.0 * GB
    store_bandwidth: float = 4.0 * GB

    def __post_init__(self):
        if min(self.pcie_bandwidth, self.intra_copy_bandwidth, self.store_bandwidth) <= 0:
            raise ConfigError(f"{self.gpu_id}: bandwidths must be positive")
        if self.pool_size <= 0:
            raise ConfigError(f"{self.gpu_id}: pool_size must be positive")

    def load_bandwidth(self, location: Location) -> float:
        # Store->cache and cache->GPU copies are pipelined; the slower one governs.
        if location == Location.MODEL_CACHE:
            return self.pcie_bandwidth
        return min(self.store_bandwidth, self.pcie_bandwidth)


@dataclass(frozen=True)
class InferenceRequest:
    request_id: int
    model_id: str
    arrival_time: float
    prompt_tokens: int
    output_tokens: int
    batch_lane: int = 0
    dataset: str = ""

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError(f"request {self.request_id}: token counts must be >= 1")


# --------------------------------------------------------------------------
# Per-model request statistics (miss probability estimator)


@dataclass(frozen=True)
class Requested:
    t: float
    model_id: str


@dataclass(frozen=True)
class Evicted:
    t: float
    model_id: str


@dataclass(frozen=True)
class ModelStats:
    model_id: str
    request_timestamps: tuple[float, ...]
    miss_probability: float
    load_bandwidth: float


class StatsTable:
    """Exponentially weighted request share over a bounded trailing window.

    A request of age ``a`` (0 = newest) carries weight ``decay**a``; the miss
    probability of a model is its share of the total weight in the window.
    With an unbounded window this equals the counter form
    ``c_m <- decay*c_m + 1`` on each request.

    Instances are immutable; :meth:`update` returns a new table.
    """

    __slots__ = ("window", "decay", "history_limit", "_history", "_last_t", "_timestamps", "_cache")

    def __init__(self, window: int | None = 256, decay: float = 0.95, history_limit: int = 16):
        if window is not None and window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        self.window = window
        self.decay = decay
        self.history_limit = history_limit
        self._history: tuple[str, ...] = ()
        self._last_t = float("-inf")
        self._timestamps: dict[str, tuple[float, ...]] = {}
        self._cache: dict[str, float] | None = None

    def _copy(self) -> "StatsTable":
        new = StatsTable.__new__(StatsTable)
        new.window = self.window
        new.decay = self.decay
        new.history_limit = self.history_limit
        new._history = self._history
        new._last_t = self._last_t
        new._timestamps = self._timestamps
        new._cache = None
        return new

    @property
    def last_timestamp(self) -> float:
        return self._last_t

    def update(self, event: Requested | Evicted) -> "StatsTable":
        if event.t < self._last_t:
            raise OrderingError(f"event at t={event.t} precedes last recorded t={self._last_t}")
        new = self._copy()
        new._last_t = event.t
        if isinstance(event, Requested):
            hist = self._history + (event.model_id,)
            if self.window is not None and len(hist) > self.window:
                hist = hist[-self.window:]
            new._history = hist
            stamps = dict(self._timestamps)
            stamps[event.model_id] = (self._timestamps.get(event.model_id, ()) + (event.t,))[-self.history_limit:]
            new._timestamps = stamps
        return new

    def extend(self, events: Iterable[Requested | Evicted]) -> "StatsTable":
        table = self
        for ev in events:
            table = table.update(ev)
        return table

    def _shares(self) -> dict[str, float]:
        if self._cache is None:
            weights: dict[str, float] = {}
            w = 1.0
            for model_id in reversed(self._history):
                weights[model_id] = weights.get(model_id, 0.0) + w
                w *= self.decay
            total = sum(weights.values())
            self._cache = {m: min(1.0, max(0.0, v / total)) for m, v in weights.items()} if total > 0 else {}
        return self._cache

    def miss_probability(self, model_id: str) -> float:
        return self._shares().get(model_id, 0.0)

    def stats_for(self, model_id: str, load_bandwidth: float) -> ModelStats:
        return ModelStats(model_id, self._timestamps.get(model_id, ()),
                          self.miss_probability(model_id), load_bandwidth)


def update_model_stats(table: StatsTable, event: Requested | Evicted) -> StatsTable:
    return table.update(event)
