import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from gpureuse.catalog import default_catalog
from gpureuse.errors import ConfigError
from gpureuse.workload import (DEFAULT_PROFILES, LOCALITY_CV, LengthDist, LengthProfile, Locality, Trace,
                               TraceSpec, apply_locality, gamma_gaps, generate_trace, runs, sample_lengths,
                               zipf_markov_sequence)

CATALOG = default_catalog()


def max_runs(seq):
    out = {}
    for m, k in runs(seq):
        out[m] = max(out.get(m, 0), k)
    return out


def test_cv_one_is_exponential():
    gaps = gamma_gaps(100_000, 2.0, 1.0, np.random.default_rng(0))
    assert abs(gaps.std() / gaps.mean() - 1.0) < 0.05
    assert abs(gaps.mean() - 2.0) < 0.05


@pytest.mark.parametrize("cv", [0.25, 0.5, 2.0])
def test_gamma_gaps_hit_target_cv(cv):
    gaps = gamma_gaps(100_000, 1.0, cv, np.random.default_rng(1))
    assert abs(gaps.std() / gaps.mean() - cv) < 0.05 * cv
    assert gaps.min() > 0


def test_gamma_gaps_reject_bad_parameters():
    with pytest.raises(ConfigError):
        gamma_gaps(10, 0.0, 1.0, np.random.default_rng(0))


def test_locality_levels_use_named_cvs():
    assert LOCALITY_CV == {Locality.L1: 0.25, Locality.L2: 0.5, Locality.L3: 1.0, Locality.L4: 2.0}
    assert TraceSpec(locality=Locality.L2).effective_cv == 0.5
    assert TraceSpec(locality=Locality.L2, cv=3.0).effective_cv == 3.0


def test_l1_has_no_adjacent_repeats():
    t = generate_trace(TraceSpec(seed=3, num_requests=2000, locality=Locality.L1, catalog=CATALOG))
    seq = [r.model_id for r in t.requests]
    assert all(a != b for a, b in zip(seq, seq[1:]))


def test_l2_halves_a_run_of_six():
    base = ["a"] * 6 + ["b", "c", "b", "c", "d"]
    out = apply_locality(base, Locality.L2)
    assert max_runs(out)["a"] == 3
    assert sorted(out) == sorted(base)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=80))
def test_locality_edits_reorder_without_deleting(seq):
    for loc in Locality:
        out = apply_locality(seq, loc)
        assert sorted(out) == sorted(seq)
    base = max_runs(seq)
    l2 = max_runs(apply_locality(seq, Locality.L2))
    assert all(l2[m] <= base[m] for m in l2)
    top = max(seq.count(m) for m in set(seq))
    if top <= len(seq) - top + 1:
        l1 = apply_locality(seq, Locality.L1)
        assert all(a != b for a, b in zip(l1, l1[1:]))


def test_l2_runs_bounded_by_half_on_generated_base():
    rng = np.random.default_rng(5)
    names = [m.model_id for m in CATALOG]
    base = zipf_markov_sequence(names, 3000, rng)
    half = {m: -(-k // 2) for m, k in max_runs(base).items()}
    out = max_runs(apply_locality(base, Locality.L2))
    assert all(out[m] <= half[m] for m in out)
    assert apply_locality(base, Locality.L3) == base == apply_locality(base, Locality.L4)


def test_markov_repeat_probability():
    rng = np.random.default_rng(6)
    seq = zipf_markov_sequence(list("abcdefgh"), 50_000, rng, repeat_prob=0.6)
    repeats = np.mean([a == b for a, b in zip(seq, seq[1:])])
    # explicit repeats at 0.6 plus popularity-driven repeats on fresh draws
    assert 0.6 < repeats < 0.75


def test_zipf_popularity_follows_catalog_order():
    rng = np.random.default_rng(7)
    seq = zipf_markov_sequence(list("abcd"), 50_000, rng, repeat_prob=0.0)
    counts = [seq.count(m) for m in "abcd"]
    assert counts == sorted(counts, reverse=True)


def test_generate_trace_properties():
    t = generate_trace(TraceSpec(seed=1, num_requests=500, catalog=CATALOG))
    times = [r.arrival_time for r in t.requests]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert [r.request_id for r in t.requests] == list(range(500))
    assert {r.dataset for r in t.requests} <= set(DEFAULT_PROFILES)
    assert all(1 <= r.prompt_tokens <= 2048 and 1 <= r.output_tokens <= 2048 for r in t.requests)


def test_generate_trace_is_deterministic():
    spec = TraceSpec(seed=9, num_requests=300, locality=Locality.L2, catalog=CATALOG)
    assert generate_trace(spec).to_jsonl() == generate_trace(spec).to_jsonl()
    other = TraceSpec(seed=10, num_requests=300, locality=Locality.L2, catalog=CATALOG)
    assert generate_trace(spec).to_jsonl() != generate_trace(other).to_jsonl()


def test_trace_round_trip(tmp_path):
    t = generate_trace(TraceSpec(seed=2, num_requests=50, catalog=CATALOG))
    p = tmp_path / "t.jsonl"
    p.write_text(t.to_jsonl())
    back = Trace.load(p)
    assert back.requests == t.requests and back.meta == t.meta


def test_trace_load_errors(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"format_version": 99}\n')
    with pytest.raises(ConfigError):
        Trace.load(p)
    with pytest.raises(ConfigError):
        Trace.load(tmp_path / "missing.jsonl")


def test_generate_trace_errors():
    with pytest.raises(ConfigError):
        generate_trace(TraceSpec(catalog=()))
    with pytest.raises(ConfigError):
        generate_trace(TraceSpec(catalog=CATALOG, base_sequence=["nope"]))


def test_base_sequence_is_used():
    base = ["opt1.3B", "opt1.3B", "qwen3B", "qwen3B", "qwen3B"]
    t = generate_trace(TraceSpec(seed=0, num_requests=5, catalog=CATALOG, base_sequence=base))
    assert [r.model_id for r in t.requests] == base


def test_degenerate_profile():
    prof = {"fixed": LengthProfile(LengthDist(128, sigma=0), LengthDist(128, sigma=0))}
    rng = np.random.default_rng(0)
    assert {sample_lengths(prof, "fixed", rng) for _ in range(50)} == {(128, 128)}


def test_disjoint_profiles_do_not_cross():
    prof = {"short": LengthProfile(LengthDist(10, lo=1, hi=20), LengthDist(10, lo=1, hi=20)),
            "long": LengthProfile(LengthDist(500, lo=400, hi=600), LengthDist(500, lo=400, hi=600))}
    rng = np.random.default_rng(0)
    for _ in range(500):
        p, o = sample_lengths(prof, "short", rng)
        assert p <= 20 and o <= 20
        p, o = sample_lengths(prof, "long", rng)
        assert p >= 400 and o >= 400


@pytest.mark.parametrize("tag", sorted(DEFAULT_PROFILES))
def test_length_means_match_profile(tag):
    rng = np.random.default_rng(8)
    prof = DEFAULT_PROFILES[tag]
    samples = np.array([sample_lengths(DEFAULT_PROFILES, tag, rng) for _ in range(10_000)])
    assert abs(samples[:, 0].mean() / prof.prompt.mean - 1) < 0.05
    assert abs(samples[:, 1].mean() / prof.output.mean - 1) < 0.05


def test_unknown_dataset_tag():
    with pytest.raises(ConfigError):
        sample_lengths(DEFAULT_PROFILES, "nope", np.random.default_rng(0))


def test_kv_footprint_spread():
    means = [p.prompt.mean + p.output.mean for p in DEFAULT_PROFILES.values()]
    ratios = [4096 / m for m in means]
    assert 20 <= min(ratios) and max(ratios) <= 140
