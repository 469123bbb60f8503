from __future__ import annotations

import csv
import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import EXAMPLE
from oracles import ListPrefixCache
from ctxreuse.cache_sim import (
    REPORT_COLUMNS,
    CacheConfig,
    OverCapacityError,
    PrefillReport,
    PrefixCache,
    hit_rate,
    reports_to_csv,
    reports_to_json,
)
from ctxreuse.core import Accessed, Appended, Context, Evicted, PreconditionError
from ctxreuse.index import ContextIndex, prefix_layout

requests_st = st.lists(
    st.lists(st.integers(0, 7), min_size=1, max_size=4, unique=True), min_size=1, max_size=25
)
sizes_st = st.dictionaries(st.integers(0, 7), st.integers(1, 900), min_size=8, max_size=8)


def test_config_validation():
    with pytest.raises(PreconditionError):
        CacheConfig(0)
    with pytest.raises(PreconditionError):
        CacheConfig(10, policy="fifo")


def run(seq, capacity):
    cache = PrefixCache(CacheConfig(capacity))
    return [cache.prefill(d, 1024) for d in seq]


def test_example_scheduled_vs_baseline():
    c6, c3, c7, c8 = (1, 2, 4), (1, 4, 0), EXAMPLE["C7"], (1, 2, 9)
    scheduled = run([c6, c8, c3, c7], 3 * 1024)
    assert scheduled[1].hit_tokens == 2048
    baseline = run([c6, c3, c7, c8], 3 * 1024)
    assert baseline[3].hit_tokens == 0


def test_repeat_hits_fully():
    cache = PrefixCache(CacheConfig(10**6))
    cache.prefill([1, 2, 3], 100)
    r = cache.prefill([1, 2, 3], 100)
    assert r.hit_tokens == r.total_tokens == 300


def test_over_capacity():
    cache = PrefixCache(CacheConfig(2048))
    with pytest.raises(OverCapacityError) as err:
        cache.prefill([1, 2, 3], 1024)
    assert err.value.shortfall == 1024
    assert "1024" in str(err.value)


def test_preconditions():
    cache = PrefixCache(CacheConfig(10_000))
    with pytest.raises(PreconditionError):
        cache.prefill([1, 1], 10)
    with pytest.raises(PreconditionError):
        cache.prefill([1], {1: 0})


def test_scaffold_hits_after_first():
    cache = PrefixCache(CacheConfig(10_000))
    a = cache.prefill([1], 100, scaffold_tokens=50)
    b = cache.prefill([2], 100, scaffold_tokens=50)
    assert (a.hit_tokens, a.miss_tokens) == (0, 150)
    assert (b.hit_tokens, b.miss_tokens) == (50, 100)
    # scaffold is never evicted
    for d in range(3, 200):
        cache.prefill([d], 100, scaffold_tokens=50)
    assert cache.scaffold_tokens == 50
    cache.check()


def test_events_for_indexed_request():
    cache = PrefixCache(CacheConfig(2048))
    r1 = cache.prefill([1, 2], 1024, path=(0,))
    assert r1.events == [Accessed((0,)), Appended((0,), 2048)]
    r2 = cache.prefill([1, 3], 1024, path=(1,))
    assert r2.events == [Accessed((1,)), Evicted(1024), Appended((1,), 1024)]
    assert r2.hit_tokens == 1024


def test_untracked_eviction_not_reported():
    cache = PrefixCache(CacheConfig(1024))
    cache.prefill([("qa", 1)], 1024)
    r = cache.prefill([5], 1024, path=(0,))
    assert r.evicted_tokens == 1024
    assert not any(isinstance(e, Evicted) for e in r.events)


def test_hit_rate():
    with pytest.raises(PreconditionError):
        hit_rate([])
    assert hit_rate(run([(1,), (2,)], 10**6)) == 0.0
    reports = run([(1, 2), (1, 2)], 10**6)
    assert hit_rate(reports[1:]) == 1.0
    assert hit_rate(reports) == 0.5


def test_export():
    reports = [PrefillReport(1, 2, 3, 0, request_id="a"), PrefillReport(3, 0, 3, 5, request_id="b")]
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reports))))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert rows[1] == {"request_id": "b", "hit_tokens": "3", "miss_tokens": "0", "total_tokens": "3", "evicted_tokens": "5"}
    assert json.loads(reports_to_json(reports))[0]["miss_tokens"] == 2


@settings(max_examples=300, deadline=None)
@given(requests_st, sizes_st, st.integers(900, 5000))
def test_matches_reference(seq, sizes, capacity):
    cache = PrefixCache(CacheConfig(capacity))
    ref = ListPrefixCache(capacity)
    for docs in seq:
        need = sum(sizes[d] for d in docs)
        if need > capacity:
            with pytest.raises(OverCapacityError):
                cache.prefill(docs, sizes)
            continue
        r = cache.prefill(docs, sizes)
        assert (r.hit_tokens, r.miss_tokens, r.evicted_tokens) == ref.prefill(docs, [sizes[d] for d in docs])
        assert r.hit_tokens + r.miss_tokens == r.total_tokens
        assert cache.resident_tokens == ref.resident() <= capacity
        cache.check()


@settings(max_examples=200, deadline=None)
@given(requests_st, st.integers(1, 8), st.integers(0, 4))
def test_monotone_capacity(seq, blocks, extra):
    # uniform block sizes: a bigger cache never hits less
    small, big = blocks * 100, (blocks + extra) * 100
    if max(len(d) for d in seq) * 100 > small:
        return
    h_small = sum(r.hit_tokens for r in run_sized(seq, small))
    h_big = sum(r.hit_tokens for r in run_sized(seq, big))
    assert h_big >= h_small


def run_sized(seq, capacity):
    cache = PrefixCache(CacheConfig(capacity))
    return [cache.prefill(d, 100) for d in seq]


def replay_into_index(seed, n=60):
    """Drive cache and index together; returns both for comparison."""
    rng = random.Random(seed)
    idx = ContextIndex(register_tokens=False)
    cache = PrefixCache(CacheConfig(rng.randint(3, 12) * 100))
    for _ in range(n):
        docs = rng.sample(range(10), rng.randint(1, 3))
        c = Context.of(docs, 100)
        node, path, shared = idx.search(c)
        if node.is_leaf and node is not idx.root and set(node.context) == set(docs):
            leaf = node
        else:
            layout = prefix_layout(c.docs, node.context) if shared else c.docs
            leaf = idx.traverse(idx.insert(c, node, path, docs=layout))
        report = cache.prefill(list(leaf.context), 100, path=leaf.path)
        for ev in report.events:
            idx.apply_cache_event(ev)
        yield idx, cache


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_event_fidelity(seed):
    for idx, cache in replay_into_index(seed):
        assert idx.total_tokens() == cache.tracked_tokens == cache.resident_tokens
