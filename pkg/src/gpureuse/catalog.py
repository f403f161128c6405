"""Default model catalog and JSON catalog loading.

Model sizes are parameter_count x 2 bytes (fp16). Each model is split into an
embedding tensor plus an attention and an MLP tensor per layer, roughly the
proportions of a decoder-only transformer. KV bytes per token follow the
usual 2 (K and V) x layers x hidden x 2 bytes convention.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .core_model import DTYPE_BYTES, Location, ModelSpec, TensorSpec
from .errors import ConfigError


@dataclass(frozen=True)
class ModelShape:
    model_id: str
    params: int
    layers: int
    hidden: int
    location: str = "ModelCache"
    latency_sensitivity: float = 1.0


DEFAULT_SHAPES = (
    ModelShape("opt1.3B", 1_300_000_000, 24, 2048),
    ModelShape("qwen3B", 3_090_000_000, 36, 2048),
    ModelShape("llama3B", 3_210_000_000, 28, 3072),
    ModelShape("opt6.7B", 6_700_000_000, 32, 4096),
    ModelShape("llama8B", 8_030_000_000, 32, 4096),
    ModelShape("yi9B", 8_830_000_000, 48, 4096),
    ModelShape("opt13B", 12_900_000_000, 40, 5120),
    ModelShape("gpt20B", 20_500_000_000, 44, 6144),
)

# tokens/second for a single decoding lane, by parameter count
DECODE_RATES = ((4_000_000_000, 80.0), (14_000_000_000, 50.0), (None, 30.0))


def decode_rate_for(params: int) -> float:
    for bound, rate in DECODE_RATES:
        if bound is None or params < bound:
            return rate
    raise AssertionError("unreachable")


def build_model(shape: ModelShape, dtype: str = "f16") -> ModelSpec:
    if shape.params <= 0 or shape.layers <= 0 or shape.hidden <= 0:
        raise ConfigError(f"{shape.model_id}: params, layers and hidden must be positive")
    per_layer = int(0.9 * shape.params) // shape.layers
    attn = per_layer // 3
    mlp = per_layer - attn
    embed = shape.params - shape.layers * per_layer
    tensors = [TensorSpec.create(shape.model_id, "embed", (embed,), dtype)]
    for i in range(shape.layers):
        tensors.append(TensorSpec.create(shape.model_id, f"layers.{i:03d}.attn", (attn,), dtype))
        tensors.append(TensorSpec.create(shape.model_id, f"layers.{i:03d}.mlp", (mlp,), dtype))
    return ModelSpec(shape.model_id, tuple(tensors), shape.latency_sensitivity, Location(shape.location),
                     bytes_per_token=2 * shape.layers * shape.hidden * DTYPE_BYTES[dtype],
                     decode_rate=decode_rate_for(shape.params))


def default_catalog(names: list[str] | None = None) -> list[ModelSpec]:
    shapes = DEFAULT_SHAPES
    if names is not None:
        known = {s.model_id: s for s in shapes}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigError(f"unknown catalog models: {unknown}")
        shapes = tuple(known[n] for n in names)
    return [build_model(s) for s in shapes]


def load_catalog(path: str | Path) -> list[ModelSpec]:
    """Read ``{"format_version": 1, "models": [{model_id, params, layers, hidden, ...}]}``."""
    try:
        doc = json.loads(Path(path).read_text())
        models = [build_model(ModelShape(**m)) for m in doc["models"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad catalog {path}: {exc}") from None
    if not models:
        raise ConfigError(f"catalog {path} is empty")
    return models


def catalog_from_config(entry) -> list[ModelSpec]:
    """Config value may be null (defaults), a list of default names, or a path."""
    if entry is None:
        return default_catalog()
    if isinstance(entry, str):
        return load_catalog(entry)
    if isinstance(entry, list):
        return default_catalog(entry)
    raise ConfigError(f"catalog must be null, a path or a list of names, got {entry!r}")
