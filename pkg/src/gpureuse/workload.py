"""Synthetic request traces: Gamma arrivals, a Zipf/Markov model sequence,
run-length editing for locality levels, and log-normal token lengths."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_model import InferenceRequest, ModelSpec
from .errors import ConfigError

TRACE_FORMAT_VERSION = 1
MIN_GAP = 1e-6


class Locality(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"


LOCALITY_CV = {Locality.L1: 0.25, Locality.L2: 0.5, Locality.L3: 1.0, Locality.L4: 2.0}


@dataclass(frozen=True)
class LengthDist:
    """Log-normal token count with the given mean, clipped to [lo, hi]."""
    mean: float
    sigma: float = 0.5
    lo: int = 1
    hi: int = 2048

    def sample(self, rng: np.random.Generator) -> int:
        if self.sigma == 0:
            return int(min(max(round(self.mean), self.lo), self.hi))
        mu = math.log(self.mean) - self.sigma ** 2 / 2
        return int(min(max(round(rng.lognormal(mu, self.sigma)), self.lo), self.hi))


@dataclass(frozen=True)
class LengthProfile:
    prompt: LengthDist
    output: LengthDist


# Mean prompt+output footprints of ~160/100/60/30 tokens: a 4096-token
# reservation overshoots them by roughly 25x to 137x.
DEFAULT_PROFILES = {
    "sharegpt": LengthProfile(LengthDist(100), LengthDist(60)),
    "humaneval": LengthProfile(LengthDist(70), LengthDist(30)),
    "alpaca": LengthProfile(LengthDist(40), LengthDist(20)),
    "gsm8k": LengthProfile(LengthDist(20), LengthDist(10)),
}


@dataclass
class TraceSpec:
    seed: int = 0
    num_requests: int = 500
    cv: float | None = None  # None: taken from the locality level
    locality: Locality = Locality.L3
    mean_interarrival: float = 2.0
    catalog: Sequence[ModelSpec] = ()
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    repeat_prob: float = 0.6
    zipf_s: float = 1.1
    base_sequence: Sequence[str] | None = None

    @property
    def effective_cv(self) -> float:
        return LOCALITY_CV[Locality(self.locality)] if self.cv is None else self.cv


@dataclass
class Trace:
    requests: list[InferenceRequest]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.requests)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"format_version": TRACE_FORMAT_VERSION, **self.meta}, sort_keys=True)]
        for r in self.requests:
            lines.append(json.dumps({"t": r.arrival_time, "model": r.model_id, "prompt_tokens": r.prompt_tokens,
                                     "output_tokens": r.output_tokens, "dataset": r.dataset}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        reqs, meta = [], {}
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "format_version" in d:
                if d["format_version"] != TRACE_FORMAT_VERSION:
                    raise ConfigError(f"unsupported trace format_version {d['format_version']}")
                meta = {k: v for k, v in d.items() if k != "format_version"}
                continue
            reqs.append(InferenceRequest(len(reqs), d["model"], float(d["t"]), int(d["prompt_tokens"]),
                                         int(d["output_tokens"]), dataset=d.get("dataset", "")))
        return cls(reqs, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        try:
            return cls.from_jsonl(Path(path).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read trace {path}: {exc}") from None


def gamma_gaps(n: int, mean: float, cv: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma(shape=1/cv^2, scale=mean*cv^2): mean ``mean``, coefficient of variation ``cv``."""
    if mean <= 0 or cv <= 0:
        raise ConfigError("mean inter-arrival and cv must be positive")
    gaps = rng.gamma(1.0 / cv ** 2, mean * cv ** 2, size=n)
    return np.maximum(gaps, MIN_GAP)


def zipf_markov_sequence(models: Sequence[str], n: int, rng: np.random.Generator,
                         repeat_prob: float = 0.6, s: float = 1.1) -> list[str]:
    ranks = np.arange(1, len(models) + 1, dtype=float)
    p = ranks ** -s
    p /= p.sum()
    seq: list[str] = []
    for _ in range(n):
        if seq and rng.random() < repeat_prob:
            seq.append(seq[-1])
        else:
            seq.append(models[int(rng.choice(len(models), p=p))])
    return seq


def runs(seq: Sequence[str]) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = []
    for m in seq:
        if out and out[-1][0] == m:
            out[-1] = (m, out[-1][1] + 1)
        else:
            out.append((m, 1))
    return out


def _arrange(chunks: list[tuple[str, int]]) -> list[tuple[str, int]]:
    """Order chunks so that no two neighbours share a model, staying close to
    the input order. A chunk that would touch its own model waits until a
    different model has been emitted."""
    out: list[tuple[str, int]] = []
    pending: list[tuple[str, int]] = []
    for c in chunks:
        placed = True
        while placed and pending:
            placed = False
            for i, p in enumerate(pending):
                if not out or out[-1][0] != p[0]:
                    out.append(pending.pop(i))
                    placed = True
                    break
        if out and out[-1][0] == c[0]:
            pending.append(c)
        else:
            out.append(c)
    for p in pending:
        out.insert(_least_run_slot(out, p), p)
    return out


def _least_run_slot(out: list[tuple[str, int]], chunk: tuple[str, int]) -> int:
    """Insertion index giving ``chunk`` the shortest same-model run (earliest on ties).
    A slot between two other models costs just the chunk itself."""
    m = chunk[0]
    before = [0] * (len(out) + 1)  # same-model tokens directly left of slot i
    for i, (name, k) in enumerate(out):
        before[i + 1] = before[i] + k if name == m else 0
    after = [0] * (len(out) + 1)
    for i in range(len(out) - 1, -1, -1):
        after[i] = after[i + 1] + out[i][1] if out[i][0] == m else 0
    return min(range(len(out) + 1), key=lambda i: (before[i] + after[i], i))


def apply_locality(seq: Sequence[str], locality: Locality) -> list[str]:
    locality = Locality(locality)
    if locality in (Locality.L3, Locality.L4):
        return list(seq)
    chunks: list[tuple[str, int]] = []
    for m, k in runs(seq):
        if locality == Locality.L1:
            chunks.extend([(m, 1)] * k)
        else:
            chunks.append((m, -(-k // 2)))
            if k // 2:
                chunks.append((m, k // 2))
    return [m for m, k in _arrange(chunks) for _ in range(k)]


def sample_lengths(profiles: dict, dataset: str, rng: np.random.Generator) -> tuple[int, int]:
    prof = profiles.get(dataset)
    if prof is None:
        raise ConfigError(f"unknown dataset tag {dataset!r}")
    return prof.prompt.sample(rng), prof.output.sample(rng)


def generate_trace(spec: TraceSpec) -> Trace:
    if not spec.catalog:
        raise ConfigError("catalog is empty")
    if spec.num_requests < 0:
        raise ConfigError("num_requests must be >= 0")
    rng = np.random.default_rng(spec.seed)
    names = [m.model_id for m in spec.catalog]
    if spec.base_sequence is not None:
        unknown = set(spec.base_sequence) - set(names)
        if unknown:
            raise ConfigError(f"base sequence names unknown models: {sorted(unknown)}")
        base = list(spec.base_sequence)[:spec.num_requests]
    else:
        base = zipf_markov_sequence(names, spec.num_requests, rng, spec.repeat_prob, spec.zipf_s)
    seq = apply_locality(base, spec.locality)
    cv = spec.effective_cv
    times = np.cumsum(gamma_gaps(len(seq), spec.mean_interarrival, cv, rng))
    tags = sorted(spec.profiles)
    reqs = []
    for i, (m, t) in enumerate(zip(seq, times)):
        tag = tags[int(rng.integers(len(tags)))]
        p, o = sample_lengths(spec.profiles, tag, rng)
        reqs.append(InferenceRequest(i, m, float(t), p, o, dataset=tag))
    meta = {"seed": spec.seed, "num_requests": len(reqs), "cv": cv, "locality": Locality(spec.locality).value,
            "mean_interarrival": spec.mean_interarrival}
    return Trace(reqs, meta)
