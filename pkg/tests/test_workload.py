from __future__ import annotations

import json

import numpy as np
import pytest

from ctxreuse.core import PreconditionError
from ctxreuse.workload import (
    CALIBRATED,
    MULTI_TURN,
    STRING_ID_BASE,
    Interner,
    TraceParseError,
    TraceRecord,
    TraceValidationError,
    WorkloadSpec,
    by_turn,
    doc_frequencies,
    draw_zipf,
    generate,
    ks_distance,
    load_trace,
    mean_pairwise_overlap,
    save_trace,
    top_share,
    turn_overlaps,
    zipf_weights,
)

SMALL = WorkloadSpec(n_docs=300, n_sessions=40, turns_per_session=3, k=8, zipf_s=1.0,
                     intra_session_overlap=0.5, seed=5)


def test_deterministic():
    assert generate(SMALL) == generate(SMALL)
    other = generate(WorkloadSpec(**{**SMALL.to_dict(), "seed": 6}))
    assert other != generate(SMALL)


def test_shape():
    recs = generate(SMALL)
    assert len(recs) == 40 * 3
    for r in recs:
        assert len(r.retrieved) == 8 == len(set(r.retrieved))
        assert all(0 <= d < 300 for d in r.retrieved)
    assert [len(b) for b in by_turn(recs)] == [40, 40, 40]


def test_uniform_overlap_matches_chance():
    n, k = 200, 10
    recs = generate(WorkloadSpec(n_docs=n, n_sessions=1000, k=k, zipf_s=0.0, seed=3))
    expected = k * k / n
    # loose bound: a pair's overlap is hypergeometric with variance below its mean
    sigma = np.sqrt(expected / 500)
    assert abs(mean_pairwise_overlap(recs) - expected) < 3 * sigma


def test_full_overlap_repeats_history():
    spec = WorkloadSpec(n_docs=100, n_sessions=10, turns_per_session=4, k=6, intra_session_overlap=1.0, seed=1)
    for r0, *rest in zip(*[iter(generate(spec))] * 4):
        for r in rest:
            assert set(r.retrieved) == set(r0.retrieved)


def test_multi_turn_overlap():
    recs = generate(WorkloadSpec(**{**MULTI_TURN.to_dict(), "n_sessions": 50}))
    ov = turn_overlaps(recs)
    assert len(ov) == 50 * 4
    assert abs(np.mean(ov) - 0.4) <= 0.05


def test_calibrated_is_skewed():
    recs = generate(WorkloadSpec(**{**CALIBRATED.to_dict(), "n_sessions": 400}))
    assert top_share(recs, CALIBRATED.n_docs) >= 0.5


def test_zipf_sampler_fit():
    rng = np.random.default_rng(0)
    samples = draw_zipf(1000, 1.1, 10_000, rng)
    assert ks_distance(samples, 1000, 1.1) < 0.05


def test_popularity_curve_non_increasing():
    w = zipf_weights(500, 0.9)
    assert np.all(np.diff(w) <= 0)
    recs = generate(WorkloadSpec(n_docs=500, n_sessions=2000, k=5, zipf_s=1.2, seed=9))
    freq = doc_frequencies(recs)
    counts = sorted(freq.values(), reverse=True)
    # head-heavy: the top decile outweighs the bottom half by a wide margin
    assert sum(counts[:50]) > 3 * sum(counts[250:])


@pytest.mark.parametrize("bad", [
    dict(k=400), dict(n_docs=0), dict(zipf_s=-1.0), dict(intra_session_overlap=1.5), dict(order_jitter=-0.1),
    dict(n_docs=20, k=8, turns_per_session=5, intra_session_overlap=0.0),
])
def test_infeasible_spec(bad):
    with pytest.raises(PreconditionError):
        generate(WorkloadSpec(**{**SMALL.to_dict(), **bad}))


def test_round_trip(tmp_path):
    recs = generate(SMALL)
    p = tmp_path / "t.ndjson"
    save_trace(recs, p)
    assert load_trace(p) == recs
    save_trace(load_trace(p), tmp_path / "u.ndjson")
    assert p.read_bytes() == (tmp_path / "u.ndjson").read_bytes()


def test_empty_file(tmp_path):
    p = tmp_path / "e.ndjson"
    p.write_text("")
    assert load_trace(p) == []


def write(tmp_path, *lines):
    p = tmp_path / "x.ndjson"
    p.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")
    return p


def test_parse_error_line_number(tmp_path):
    p = write(tmp_path, {"session_id": "a", "turn": 0, "retrieved": ["1"]}, "{not json")
    with pytest.raises(TraceParseError) as err:
        load_trace(p)
    assert err.value.line_no == 2
    p = write(tmp_path, {"session_id": "a", "retrieved": ["1"]})
    with pytest.raises(TraceParseError, match="turn"):
        load_trace(p)


def test_duplicate_doc(tmp_path):
    p = write(tmp_path, {"session_id": "a", "turn": 0, "retrieved": ["1", "2", "1"]})
    with pytest.raises(TraceValidationError) as err:
        load_trace(p)
    assert (err.value.session_id, err.value.turn) == ("a", 0)


def test_turn_gap(tmp_path):
    p = write(tmp_path,
              {"session_id": "a", "turn": 0, "retrieved": ["1"]},
              {"session_id": "a", "turn": 2, "retrieved": ["1"]})
    with pytest.raises(TraceValidationError, match="expected turn 1"):
        load_trace(p)


def test_bad_token_count(tmp_path):
    p = write(tmp_path, {"session_id": "a", "turn": 0, "retrieved": ["1"], "doc_tokens": {"1": 0}})
    with pytest.raises(TraceValidationError):
        load_trace(p)


def test_string_ids(tmp_path):
    it = Interner()
    p = write(tmp_path, {"session_id": "a", "turn": 0, "retrieved": ["wiki/X", "7", "007"],
                         "doc_tokens": {"wiki/X": 12}, "query": "q"})
    (r,) = load_trace(p, it)
    assert r.retrieved[1] == 7
    assert r.retrieved[0] >= STRING_ID_BASE and r.retrieved[2] >= STRING_ID_BASE
    assert r.doc_tokens[r.retrieved[0]] == 12 and r.doc_tokens[7] == 1024
    assert it.name(r.retrieved[0]) == "wiki/X" and it.name(7) == "7"
    assert Interner.from_json(it.to_json()).ids == it.ids
    save_trace([r], tmp_path / "o.ndjson", it)
    assert load_trace(tmp_path / "o.ndjson", Interner.from_json(it.to_json())) == [r]


def test_interner_rejects():
    it = Interner()
    for bad in (True, None, 1.5):
        with pytest.raises(TypeError):
            it.intern(bad)
    with pytest.raises(ValueError):
        it.intern(-1)


def test_record_context():
    c = TraceRecord("s", 1, (3, 4), {3: 10}).context()
    assert c.docs == (3, 4) and c.token_counts[4] == 1024 and c.turn == 1
