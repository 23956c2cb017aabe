import csv

import numpy as np
import pytest
from conftest import toy_records
from hypothesis import given, settings
from hypothesis import strategies as st

from polycl.dataset import build_index
from polycl.triplets import (
    SAMPLERS,
    NoNegativeCandidateError,
    NoPositiveCandidateError,
    Strategy,
    Triplet,
    TripletSampler,
    UnknownOrganFlagError,
    check_compatible,
    sample_mixed,
    satisfies_strategy,
    write_trace,
)

flag_lists = st.lists(st.booleans(), min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(st.sampled_from("abcde"), flag_lists, min_size=2, max_size=5), st.integers(0, 2**16))
def test_every_sampled_triplet_satisfies_its_rule(flags, seed):
    idx = build_index(toy_records(flags))
    for strategy in Strategy:
        try:
            check_compatible(idx, strategy)
        except (NoNegativeCandidateError, UnknownOrganFlagError):
            continue
        sampler = TripletSampler(idx, strategy, seed)
        triplets = sampler.epoch(0)
        assert len(triplets) + sampler.skipped_count == len(idx)
        for t in triplets:
            assert satisfies_strategy(t), t
            assert t.fallback_used == (strategy is Strategy.M and t.negative.scan_id != t.anchor.scan_id)


def test_predicate_rejects_violations():
    (a0, a1, a2), (b0,) = toy_records({"a": [True, True, False], "b": [False]})
    assert satisfies_strategy(Triplet(a0, a1, a2, Strategy.M))
    assert not satisfies_strategy(Triplet(a0, a0, a2, Strategy.M))  # anchor reused
    assert not satisfies_strategy(Triplet(a0, a1, b0, Strategy.M))  # cross-scan neg without flag
    assert satisfies_strategy(Triplet(a0, a1, b0, Strategy.M, fallback_used=True))
    assert not satisfies_strategy(Triplet(a0, a2, b0, Strategy.O))
    assert not satisfies_strategy(Triplet(a0, a1, a2, Strategy.S))


def test_mixed_fallback_counted():
    idx = build_index(toy_records({"a": [True, True], "b": [False, False]}))
    sampler = TripletSampler(idx, "M", seed=0)
    ts = sampler.epoch(0)
    assert len(ts) == 4 and all(t.fallback_used for t in ts)
    assert sampler.fallback_count == 4


def test_single_slice_anchor_skipped():
    idx = build_index(toy_records({"a": [True], "b": [False, True]}))
    sampler = TripletSampler(idx, "S", seed=0)
    assert len(sampler.epoch(0)) == 2 and sampler.skipped_count == 1
    with pytest.raises(NoPositiveCandidateError):
        SAMPLERS[Strategy.S](idx, idx.records[0], np.random.default_rng(0))


def test_compatibility_errors():
    with pytest.raises(NoNegativeCandidateError):
        check_compatible(build_index(toy_records({"a": [True, False]})), "S")
    with pytest.raises(UnknownOrganFlagError):
        check_compatible(build_index(toy_records({"a": [True, None], "b": [False]})), "M")
    with pytest.raises(NoNegativeCandidateError):
        check_compatible(build_index(toy_records({"a": [True, True], "b": [True]})), "O")
    check_compatible(build_index(toy_records({"a": [None], "b": [None]})), "S")


def test_unknown_flag_anchor_raises():
    idx = build_index(toy_records({"a": [None, True], "b": [False]}))
    with pytest.raises(UnknownOrganFlagError):
        sample_mixed(idx, idx.records[0], np.random.default_rng(0))


def test_no_negative_anywhere():
    idx = build_index(toy_records({"a": [True, True], "b": [True]}))
    with pytest.raises(NoNegativeCandidateError):
        sample_mixed(idx, idx.records[0], np.random.default_rng(0))


def test_epochs_replayable(index):
    s1 = TripletSampler(index.for_split("train"), "M", seed=5)
    s2 = TripletSampler(index.for_split("train"), "M", seed=5)
    e3 = [(t.anchor.record_id, t.positive.record_id, t.negative.record_id) for t in s1.epoch(3)]
    e3b = [(t.anchor.record_id, t.positive.record_id, t.negative.record_id) for t in s2.epoch(3)]
    assert e3 == e3b
    assert e3 != [(t.anchor.record_id, t.positive.record_id, t.negative.record_id) for t in s1.epoch(4)]


def test_each_slice_anchors_once(index):
    ts = TripletSampler(index, "S", seed=0).epoch(0)
    assert sorted(t.anchor.record_id for t in ts) == sorted(r.record_id for r in index.records)


def test_trace_csv(tmp_path, index):
    sampler = TripletSampler(index, "O", seed=0)
    path = tmp_path / "trace.csv"
    for e, ts in sampler.iter_epochs(2):
        write_trace(path, e, ts)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 2 * len(index)
    assert rows[0].keys() == {"epoch", "anchor_id", "pos_id", "neg_id", "strategy", "fallback"}
    assert {r["epoch"] for r in rows} == {"0", "1"}
