import itertools

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from gpureuse.core_model import (GB, GpuSpec, InferenceRequest, Location, ModelSpec, Requested, Evicted,
                                 StatsTable, TensorId, TensorSpec, fingerprint, update_model_stats)
from gpureuse.errors import ConfigError, OrderingError

from conftest import make_model


def test_fingerprint_is_deterministic():
    a = fingerprint("opt1.3B", "layer0.qkv", [2048, 6144], "f16")
    b = fingerprint("opt1.3B", "layer0.qkv", [2048, 6144], "f16")
    assert a == b
    assert a.fingerprint < 2**128


def test_fingerprint_differs_by_name():
    a = fingerprint("opt1.3B", "layer0.qkv", [2048, 6144], "f16")
    b = fingerprint("opt1.3B", "layer1.qkv", [2048, 6144], "f16")
    assert a != b


def test_fingerprint_is_stable_across_processes():
    # blake2b-128 over "opt1.3B\x1flayer0.qkv\x1f2048,6144\x1ff16", no salting
    import hashlib
    canon = "opt1.3B\x1flayer0.qkv\x1f2048,6144\x1ff16".encode()
    want = int.from_bytes(hashlib.blake2b(canon, digest_size=16).digest(), "big")
    assert fingerprint("opt1.3B", "layer0.qkv", (2048, 6144), "f16").fingerprint == want


def test_fingerprint_no_collisions_on_10k_tuples():
    rng = np.random.default_rng(0)
    tuples = set()
    while len(tuples) < 10_000:
        tuples.add((f"m{rng.integers(50)}", f"w{rng.integers(1000)}",
                    tuple(int(d) for d in rng.integers(1, 4096, size=rng.integers(1, 4))),
                    ["f16", "f32", "i8"][rng.integers(3)]))
    ids = {fingerprint(m, n, s, d) for m, n, s, d in tuples}
    assert len(ids) == len(tuples)


def test_fingerprint_rejects_empty_fields():
    with pytest.raises(ValueError):
        fingerprint("", "x", [1], "f16")
    with pytest.raises(ValueError):
        fingerprint("m", "", [1], "f16")


@given(st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8),
       st.lists(st.integers(1, 10**6), max_size=4))
def test_fingerprint_round_trips_through_hex(model, name, shape):
    tid = fingerprint(model, name, shape, "f16")
    assert TensorId.parse(str(tid)) == tid


def test_tensor_spec_size_from_shape_and_dtype():
    t = TensorSpec.create("m", "w", (4, 8), "f16")
    assert t.size == 64
    with pytest.raises(ValueError):
        TensorSpec(t.id, "m", "w", 0)


def test_model_spec_orders_tensors_and_sums_size():
    m = make_model("m", [5, 3, 7])
    assert [t.name for t in m.tensors] == sorted(t.name for t in m.tensors)
    assert m.total_size == 15
    assert m.latency_sensitivity == 1.0
    assert m.location == Location.MODEL_CACHE
    with pytest.raises(ConfigError):
        make_model("m", [1], latency_sensitivity=0.0)


def test_model_spec_rejects_foreign_tensor():
    t = TensorSpec.create("other", "w", (4,), "u8")
    with pytest.raises(ConfigError):
        ModelSpec("m", (t,))


def test_gpu_spec_validation_and_bandwidth():
    g = GpuSpec("g", 10 * GB, pcie_bandwidth=20.0, store_bandwidth=5.0)
    assert g.load_bandwidth(Location.MODEL_CACHE) == 20.0
    assert g.load_bandwidth(Location.MODEL_STORE) == 5.0
    with pytest.raises(ConfigError):
        GpuSpec("g", 10, pcie_bandwidth=0)
    with pytest.raises(ConfigError):
        GpuSpec("g", 0)


def test_request_requires_positive_tokens():
    with pytest.raises(ValueError):
        InferenceRequest(0, "m", 0.0, 0, 1)
    with pytest.raises(ValueError):
        InferenceRequest(0, "m", 0.0, 1, 0)


def test_never_requested_model_has_zero_miss_probability():
    assert StatsTable().miss_probability("A") == 0.0
    t = StatsTable().update(Requested(0.0, "B"))
    assert t.miss_probability("A") == 0.0


def test_only_requested_model_saturates():
    t = StatsTable(window=4)
    for i in range(6):
        t = t.update(Requested(float(i), "A"))
    assert t.miss_probability("A") == 1.0


def test_alternating_requests_plain_frequency():
    t = StatsTable(window=4, decay=1.0)
    for i, m in enumerate("ABABAB"):
        t = t.update(Requested(float(i), m))
    assert t.miss_probability("A") == 0.5
    assert t.miss_probability("B") == 0.5


def test_unbounded_window_matches_counter_form():
    lam = 0.95
    seq = "AABCABBBCA"
    counters = {}
    for m in seq:
        counters = {k: lam * v for k, v in counters.items()}
        counters[m] = counters.get(m, 0.0) + 1.0
    total = sum(counters.values())
    t = StatsTable(window=None, decay=lam)
    for i, m in enumerate(seq):
        t = update_model_stats(t, Requested(float(i), m))
    for m in "ABC":
        assert t.miss_probability(m) == pytest.approx(counters[m] / total)


def test_out_of_order_event_rejected():
    t = StatsTable().update(Requested(5.0, "A"))
    with pytest.raises(OrderingError):
        t.update(Requested(4.0, "A"))
    with pytest.raises(OrderingError):
        t.update(Evicted(4.0, "A"))


def test_update_is_pure():
    t0 = StatsTable()
    t1 = t0.update(Requested(0.0, "A"))
    assert t0.miss_probability("A") == 0.0
    assert t1.miss_probability("A") == 1.0


@given(st.lists(st.sampled_from("ABCD"), max_size=40), st.integers(1, 8))
def test_stats_independent_of_batching(seq, chunk):
    events = [Requested(float(i), m) for i, m in enumerate(seq)]
    one = StatsTable().extend(events)
    t = StatsTable()
    for i in range(0, len(events), chunk):
        t = t.extend(events[i:i + chunk])
    for m in "ABCD":
        assert one.miss_probability(m) == t.miss_probability(m)
        assert 0.0 <= one.miss_probability(m) <= 1.0


def test_stats_for_reports_recent_timestamps():
    t = StatsTable(history_limit=2)
    for i in range(3):
        t = t.update(Requested(float(i), "A"))
    ms = t.stats_for("A", 7.0)
    assert ms.request_timestamps == (1.0, 2.0)
    assert ms.load_bandwidth == 7.0
    assert ms.miss_probability == 1.0
