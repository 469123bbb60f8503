from __future__ import annotations

import json

import pytest

from conftest import EXAMPLE
from oracles import ListPrefixCache
from ctxreuse.core import Context, PreconditionError, UnknownSessionError
from ctxreuse.pipeline import ExperimentConfig, Rewriter, run_experiment
from ctxreuse.workload import TraceRecord, WorkloadSpec, generate, save_trace

SPEC = WorkloadSpec(n_docs=120, n_sessions=60, k=6, zipf_s=0.9, seed=4, order_jitter=2.0)
MULTI = WorkloadSpec(n_docs=400, n_sessions=30, turns_per_session=5, k=10, zipf_s=0.8,
                     intra_session_overlap=0.4, seed=8)


def rec(name, docs=None):
    docs = EXAMPLE[name] if docs is None else docs
    return TraceRecord(name, 0, tuple(docs), {d: 1024 for d in docs})


def example_run(**toggles):
    seeds = [rec("C1"), rec("C2"), rec("C3")]
    batch = [rec("C6"), rec("C3b", EXAMPLE["C3"]), rec("C7"), rec("C8")]
    cfg = ExperimentConfig(capacity_tokens=3 * 1024, **toggles)
    return run_experiment(cfg, batch, seeds)


def test_example_walkthrough():
    res = example_run()
    assert res.executed == ["C6:0", "C8:0", "C3b:0", "C7:0"]
    assert res.requests["C6:0"].ordered_docs == (1, 2, 4)
    assert res.requests["C8:0"].ordered_docs == (1, 2, 9)
    hits = {rid: r.hit_tokens for rid, r in zip(res.executed, res.reports)}
    assert hits["C8:0"] == 2048
    assert res.summary["index_sync_errors"] == 0


def test_example_baseline():
    res = example_run(ordering=False, scheduling=False)
    assert res.executed == ["C6:0", "C3b:0", "C7:0", "C8:0"]
    assert res.reports[-1].hit_tokens == 0
    assert "index" not in res.summary


def test_all_off_is_plain_prefix_cache():
    recs = generate(SPEC)
    res = run_experiment(ExperimentConfig(workload=SPEC, capacity_tokens=20 * 1024,
                                          ordering=False, scheduling=False))
    ref = ListPrefixCache(20 * 1024)
    for r, rep in zip(recs, res.reports):
        assert (rep.hit_tokens, rep.miss_tokens, rep.evicted_tokens) == ref.prefill(
            list(r.retrieved), [1024] * len(r.retrieved))


def test_reuse_stages_help():
    base = run_experiment(ExperimentConfig(workload=SPEC, capacity_tokens=16 * 1024,
                                           ordering=False, scheduling=False)).summary
    full = run_experiment(ExperimentConfig(workload=SPEC, capacity_tokens=16 * 1024)).summary
    assert full["hit_rate"] > base["hit_rate"]
    assert full["index_sync_errors"] == 0
    assert full["total_tokens"] == base["total_tokens"]


def test_outputs_deterministic(tmp_path):
    for d in ("a", "b"):
        run_experiment(ExperimentConfig(workload=SPEC, output_dir=str(tmp_path / d), hints=True))
    for name in ("requests.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["requests"] == 60
    assert "index_build_seconds" not in summary


def test_trace_file_matches_workload(tmp_path):
    p = tmp_path / "t.ndjson"
    save_trace(generate(SPEC), p)
    a = run_experiment(ExperimentConfig(trace_path=str(p))).summary
    b = run_experiment(ExperimentConfig(workload=SPEC)).summary
    assert a == b


def test_seed_override():
    a = run_experiment(ExperimentConfig(workload=SPEC, seed=99)).summary
    b = run_experiment(ExperimentConfig(workload=WorkloadSpec(**{**SPEC.to_dict(), "seed": 99}))).summary
    assert a == b


def test_breakdown_and_timings():
    s = run_experiment(ExperimentConfig(workload=MULTI, dedup=True, breakdown=True, timings=True)).summary
    assert list(s["stages"]) == ["baseline", "ordering", "scheduling", "dedup"]
    assert "hit_rate_delta" not in s["stages"]["baseline"]
    assert s["stages"]["dedup"]["prefilled_delta"] < 0
    assert s["index_build_seconds"] >= 0


def test_dedup_saves_prefill():
    kw = dict(workload=MULTI, capacity_tokens=10**7)
    plain = run_experiment(ExperimentConfig(**kw)).summary
    dd = run_experiment(ExperimentConfig(dedup=True, **kw)).summary
    # 4 of 5 turns re-retrieve 40% of their docs; with room for everything
    # only those repeats stop being prefilled
    assert plain["prefilled_tokens"] - dd["prefilled_tokens"] == dd["dedup_saved_tokens"]
    assert dd["dedup_saved_tokens"] == 30 * 4 * 4 * 1024
    assert dd["index_sync_errors"] == 0


def test_qa_blocks_are_history():
    kw = dict(workload=MULTI, capacity_tokens=10**7, dedup=True)
    a = run_experiment(ExperimentConfig(**kw)).summary
    b = run_experiment(ExperimentConfig(qa_tokens=50, **kw)).summary
    # a turn's question and answer are prefilled as history by the next turn
    assert b["prefilled_tokens"] - a["prefilled_tokens"] == 30 * 4 * 50


def test_online_mode():
    s = run_experiment(ExperimentConfig(workload=SPEC, mode="online")).summary
    assert s["mode"] == "online" and s["requests"] == 60
    assert s["index"]["leaves"] >= 1


def test_scaffold_counts():
    s = run_experiment(ExperimentConfig(workload=SPEC, scaffold_tokens=100, capacity_tokens=10**6)).summary
    base = run_experiment(ExperimentConfig(workload=SPEC, capacity_tokens=10**6)).summary
    assert s["total_tokens"] == base["total_tokens"] + 60 * 100
    assert s["hit_tokens"] == base["hit_tokens"] + 59 * 100


@pytest.mark.parametrize("bad", [
    dict(), dict(workload=SPEC, trace_path="x"), dict(workload=SPEC, mode="stream"),
    dict(workload=SPEC, capacity_tokens=0), dict(workload=SPEC, alpha=0.5),
    dict(workload=SPEC, qa_tokens=-1),
])
def test_config_validation(bad):
    with pytest.raises(PreconditionError):
        run_experiment(ExperimentConfig(**bad))


def test_rewriter_sessions():
    rw = Rewriter()
    r0 = rw.rewrite(Context.of([2, 1, 4], session_id="u"))
    assert r0.dedup_refs == () and r0.location_hints == ()
    with pytest.raises(PreconditionError):
        rw.rewrite(Context.of([1], session_id="u"))
    with pytest.raises(PreconditionError):
        rw.rewrite(Context.of([1], session_id="u", turn=2))
    with pytest.raises(UnknownSessionError):
        rw.rewrite(Context.of([1], session_id="v", turn=1))
    r1 = rw.rewrite(Context.of([1, 5, 2], session_id="u", turn=1))
    assert r1.ordered_docs == (5,)
    assert len(r1.location_hints) == 2


def test_rewriter_passthrough():
    rw = Rewriter(ordering=False, dedup=False, hints=False)
    r0 = rw.rewrite(Context.of([2, 1, 4], session_id="u"))
    assert r0.ordered_docs == (2, 1, 4) and r0.order_hint is None
    r1 = rw.rewrite(Context.of([1, 5], session_id="u", turn=1))
    assert r1.ordered_docs == (1, 5)


def test_oversized_request_bypasses_cache():
    # without dedup the growing history outgrows a small cache
    s = run_experiment(ExperimentConfig(workload=MULTI, capacity_tokens=30 * 1024)).summary
    assert s["uncacheable_requests"] > 0
    assert s["hit_tokens"] + s["prefilled_tokens"] == s["total_tokens"]
    assert s["index_sync_errors"] == 0
