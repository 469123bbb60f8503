from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxreuse.core import Context, Evicted, InvalidPathError, PreconditionError, UnknownSessionError
from ctxreuse.dedup import (
    SessionState,
    SessionStore,
    activate_multi_turn,
    dedup_turn,
    open_session,
    passthrough_turn,
)
from ctxreuse.index import ContextIndex
from ctxreuse.ordering import order_context


def start(docs=(1, 2, 4), sid="s"):
    idx = ContextIndex()
    c0 = Context.of(docs, session_id=sid)
    oc = order_context(idx, c0)
    return idx, open_session(idx, c0, oc.path)


def test_walkthrough():
    idx, st0 = start()
    activate_multi_turn(st0, idx)
    assert idx.traverse(st0.path).multi_turn
    req, st1 = dedup_turn(st0, idx, Context.of([1, 5, 2], session_id="s", turn=1))
    assert req.ordered_docs == (5,)
    assert req.dedup_refs == ((1, 0), (2, 0))
    assert st1.seen_docs == {1: 0, 2: 0, 4: 0, 5: 1}
    assert st1.cumulative_tokens == 4 * 1024
    assert st1.turn == 2
    # the input state is untouched
    assert st0.turn == 1 and 5 not in st0.seen_docs
    req.check_conservation()


def test_fully_novel():
    idx, s = start()
    req, _ = dedup_turn(s, idx, Context.of([9, 7, 8], session_id="s", turn=1))
    assert req.ordered_docs == (9, 7, 8) and req.dedup_refs == ()


def test_fully_repeated():
    idx, s = start()
    req, _ = dedup_turn(s, idx, Context.of([4, 2, 1], session_id="s", turn=1))
    assert req.ordered_docs == () and [d for d, _ in req.dedup_refs] == [4, 2, 1]


def test_activation_idempotent():
    idx, s = start()
    activate_multi_turn(s, idx)
    activate_multi_turn(s, idx)
    assert s.multi_turn and idx.traverse(s.path).multi_turn


def test_activation_before_first_turn():
    with pytest.raises(PreconditionError):
        activate_multi_turn(SessionState("x"), ContextIndex())


def test_turn_zero_rejected():
    with pytest.raises(PreconditionError):
        dedup_turn(SessionState("x"), ContextIndex(), Context.of([1]))


def test_invalid_path():
    idx, s = start()
    s.path = (7,)
    s.node_uid = 10_000
    with pytest.raises(InvalidPathError):
        dedup_turn(s, idx, Context.of([1], session_id="s", turn=1))


def test_wrong_session():
    idx, s = start()
    with pytest.raises(UnknownSessionError):
        dedup_turn(s, idx, Context.of([1], session_id="other", turn=1))
    with pytest.raises(UnknownSessionError):
        SessionStore().get_state("nobody")


def test_evicted_node_still_dedups():
    idx = ContextIndex(register_tokens=True)
    c0 = Context.of([1, 2, 4], session_id="s")
    oc = order_context(idx, c0)
    s = open_session(idx, c0, oc.path)
    idx.apply_cache_event(Evicted(10**6))
    req, _ = dedup_turn(s, idx, Context.of([1, 5], session_id="s", turn=1))
    assert req.cache_miss
    assert req.ordered_docs == (5,)


def test_follows_node_after_split():
    idx, s = start((1, 2, 4))
    # a partial match splits the session's leaf under a new virtual node
    other = Context.of([1, 2, 7], session_id="t")
    order_context(idx, other)
    req, s2 = dedup_turn(s, idx, Context.of([2, 3], session_id="s", turn=1))
    assert not req.cache_miss
    assert idx.traverse(s2.path).uid == s.node_uid


def test_passthrough():
    _, s = start()
    req, s2 = passthrough_turn(s, Context.of([1, 5], session_id="s", turn=1))
    assert req.ordered_docs == (1, 5) and req.dedup_refs == ()
    assert s2.cumulative_tokens == s.cumulative_tokens + 2048
    assert s2.seen_docs[1] == 0 and s2.seen_docs[5] == 1


def test_store_round_trip():
    idx, s = start()
    store = SessionStore({"s": s})
    again = SessionStore.from_json(json.loads(json.dumps(store.to_json())))
    assert again == store


turns_st = st.lists(st.lists(st.integers(0, 15), min_size=1, max_size=6, unique=True), min_size=2, max_size=5)


@settings(max_examples=200, deadline=None)
@given(turns_st)
def test_session_properties(turns):
    idx, s = start(turns[0])
    activate_multi_turn(s, idx)
    prefilled = [set(turns[0])]
    for t, docs in enumerate(turns[1:], 1):
        before = s
        req, s = dedup_turn(s, idx, Context.of(docs, session_id="s", turn=t))
        req.check_conservation()
        assert list(req.ordered_docs) == [d for d in docs if d not in before.seen_docs]
        for d, first in req.dedup_refs:
            assert first < t and d in prefilled[first]
        assert s.cumulative_tokens >= before.cumulative_tokens
        assert set(before.seen_docs) <= set(s.seen_docs)
        prefilled.append(set(req.ordered_docs))
    flat = [d for p in prefilled for d in p]
    assert len(flat) == len(set(flat))  # never prefilled twice
    assert set(flat) == set().union(*map(set, turns))
