"""End-to-end request rewriting and cache experiments."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Hashable, Optional, Sequence

from .cache_sim import CacheConfig, OverCapacityError, PrefillReport, PrefixCache, hit_rate, reports_to_csv
from .core import Context, InvalidPathError, PreconditionError, RewrittenRequest
from .dedup import SessionStore, activate_multi_turn, dedup_turn, open_session, passthrough_turn
from .distance import DistanceParams
from .hints import Labeler, default_label, with_hints
from .index import ContextIndex
from .ordering import OrderedContext, inherit, order_batch, order_context, refresh_paths
from .scheduler import schedule
from .workload import TraceRecord, WorkloadSpec, by_turn, generate, load_trace

log = logging.getLogger(__name__)


class Rewriter:
    """Per-request ordering, de-duplication and hinting over shared state.

    Used by the gateway; every reply depends only on the index, the session
    store and the request itself.
    """

    def __init__(
        self,
        index: Optional[ContextIndex] = None,
        sessions: Optional[SessionStore] = None,
        ordering: bool = True,
        dedup: bool = True,
        hints: bool = True,
        labeler: Labeler = default_label,
    ):
        self.labeler = labeler
        self.index = index if index is not None else ContextIndex()
        self.sessions = sessions if sessions is not None else SessionStore()
        self.ordering = ordering
        self.dedup = dedup
        self.hints = hints

    def rewrite(self, ctx: Context) -> RewrittenRequest:
        sid = ctx.session_id
        if ctx.turn == 0:
            if sid in self.sessions:
                raise PreconditionError(f"session {sid!r} already has a first turn")
            if self.ordering:
                oc = order_context(self.index, ctx)
                req = RewrittenRequest(ctx, oc.docs, path=oc.path)
            else:
                req = RewrittenRequest(ctx, ctx.docs)
            self.sessions[sid] = open_session(self.index, ctx, req.path)
        else:
            state = self.sessions.get_state(sid)
            if ctx.turn != state.turn:
                raise PreconditionError(f"session {sid!r} expects turn {state.turn}, got {ctx.turn}")
            if self.dedup:
                if not state.multi_turn:
                    activate_multi_turn(state, self.index)
                req, state = dedup_turn(state, self.index, ctx)
            else:
                req, state = passthrough_turn(state, ctx)
            self.sessions[sid] = state
        if self.hints:
            with_hints(req, self.labeler)
        return req


@dataclass
class ExperimentConfig:
    workload: Optional[WorkloadSpec] = None
    trace_path: Optional[str] = None
    # records to build the index from before the run; never prefilled
    seed_trace_path: Optional[str] = None
    capacity_tokens: int = 64 * 1024
    alpha: float = 0.005
    ordering: bool = True
    scheduling: bool = True
    dedup: bool = False
    hints: bool = False
    mode: str = "batch"  # batch | online
    scaffold_tokens: int = 0
    # tokens of each turn's question and answer, replayed as history later
    qa_tokens: int = 0
    output_dir: Optional[str] = None
    seed: Optional[int] = None
    breakdown: bool = False
    timings: bool = False

    def validate(self) -> None:
        if (self.workload is None) == (self.trace_path is None):
            raise PreconditionError("exactly one of workload or trace_path is required")
        if self.mode not in ("batch", "online"):
            raise PreconditionError(f"unknown mode {self.mode!r}")
        if self.capacity_tokens <= 0:
            raise PreconditionError("capacity_tokens must be positive")
        DistanceParams(self.alpha)
        if self.scaffold_tokens < 0 or self.qa_tokens < 0:
            raise PreconditionError("token counts must be non-negative")

    def toggles(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ("ordering", "scheduling", "dedup", "hints")}

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["workload"] = self.workload.to_dict() if self.workload else None
        return d


@dataclass
class ExperimentResult:
    summary: dict[str, Any]
    reports: list[PrefillReport]
    # request ids in execution order
    executed: list[str] = field(default_factory=list)
    requests: dict[str, RewrittenRequest] = field(default_factory=dict)
    index: Optional[ContextIndex] = None
    cache: Optional[PrefixCache] = None


def request_id(r: TraceRecord | Context) -> str:
    return f"{r.session_id}:{r.turn}"


def load_records(cfg: ExperimentConfig) -> list[TraceRecord]:
    if cfg.trace_path is not None:
        return load_trace(cfg.trace_path)
    spec = cfg.workload
    if cfg.seed is not None:
        spec = WorkloadSpec(**{**spec.to_dict(), "seed": cfg.seed})
    return generate(spec)


class _Run:
    def __init__(self, cfg: ExperimentConfig, records: Sequence[TraceRecord], seeds: Sequence[TraceRecord]):
        self.cfg = cfg
        self.records = records
        self.index = ContextIndex(DistanceParams(cfg.alpha), register_tokens=False)
        self.seeded = bool(seeds)
        self.cache = PrefixCache(CacheConfig(cfg.capacity_tokens))
        self.sessions = SessionStore()
        self.history: dict[str, list[Hashable]] = {}
        self.tokens: dict[Hashable, int] = {}
        self.reports: list[PrefillReport] = []
        self.executed: list[str] = []
        self.requests: dict[str, RewrittenRequest] = {}
        self.sync_errors = 0
        self.uncacheable = 0
        self.dedup_saved = 0
        self.build_seconds = 0.0
        self.multi_turn = any(r.turn > 0 for r in records)
        if seeds:
            self._build([r.context() for r in seeds])

    @property
    def indexing(self) -> bool:
        return self.cfg.ordering or self.cfg.scheduling

    def _build(self, ctxs: list[Context]) -> None:
        t0 = time.perf_counter()
        self.index = ContextIndex.build(ctxs, DistanceParams(self.cfg.alpha), register_tokens=False)
        self.build_seconds += time.perf_counter() - t0

    def _prefill(self, rid: str, blocks: list[Hashable], path) -> None:
        try:
            report = self.cache.prefill(blocks, self.tokens, self.cfg.scaffold_tokens, path=path, request_id=rid)
        except OverCapacityError as exc:
            # served without touching the cache: every token is computed
            self.uncacheable += 1
            log.debug("%s bypasses the cache: %s", rid, exc)
            report = PrefillReport(0, exc.needed, exc.needed, 0, request_id=rid)
        for ev in report.events:
            try:
                self.index.apply_cache_event(ev)
            except InvalidPathError as exc:
                self.sync_errors += 1
                log.debug("index out of sync at %s: %s", rid, exc)
        self.reports.append(report)
        self.executed.append(rid)

    def _tracked_path(self, oc: Optional[OrderedContext]):
        # requests whose index node is gone are prefilled untracked
        if oc is None or oc.uid is None:
            return None
        node = self.index.node(oc.uid)
        return None if node is None else node.path

    def _first_turn(self, batch: list[TraceRecord]) -> None:
        cfg = self.cfg
        ctxs = [r.context() for r in batch]
        for c in ctxs:
            self.tokens.update((d, c.token_counts[d]) for d in c.docs)
        ordered: list[Optional[OrderedContext]] = [None] * len(ctxs)
        online = cfg.mode == "online"
        if self.indexing and not online:
            if not self.seeded and len(self.index.leaves) == 0 and len(ctxs) >= 2:
                self._build(ctxs)
                ordered = inherit(self.index, ctxs)
            else:
                t0 = time.perf_counter()
                ordered = order_batch(self.index, ctxs)
                self.build_seconds += time.perf_counter() - t0
        if cfg.scheduling and self.indexing and not online:
            refresh_paths(self.index, ordered)
            sequence = list(schedule(ordered).order)
        else:
            sequence = list(range(len(ctxs)))
        for i in sequence:
            ctx = ctxs[i]
            oc = ordered[i]
            if self.indexing and online:
                oc = ordered[i] = order_context(self.index, ctx)
            docs = oc.docs if (cfg.ordering and oc is not None) else ctx.docs
            path = self._tracked_path(oc)
            req = RewrittenRequest(ctx, tuple(docs), path=tuple(path or ()))
            if cfg.hints:
                with_hints(req)
            rid = request_id(ctx)
            self.requests[rid] = req
            self._prefill(rid, list(docs), path)
            if self.multi_turn:
                self.sessions[ctx.session_id] = open_session(self.index, ctx, req.path)
                self.history[ctx.session_id] = list(docs) + self._qa(ctx)

    def _qa(self, ctx: Context) -> list[Hashable]:
        if not self.cfg.qa_tokens:
            return []
        key = ("qa", ctx.session_id, ctx.turn)
        self.tokens[key] = self.cfg.qa_tokens
        return [key]

    def _later_turn(self, batch: list[TraceRecord]) -> None:
        cfg = self.cfg
        for r in batch:
            ctx = r.context()
            state = self.sessions.get_state(ctx.session_id)
            if cfg.dedup:
                if not state.multi_turn:
                    activate_multi_turn(state, self.index)
                req, state = dedup_turn(state, self.index, ctx)
                self.dedup_saved += ctx.tokens(d for d, _ in req.dedup_refs)
            else:
                req, state = passthrough_turn(state, ctx)
            self.sessions[ctx.session_id] = state
            if cfg.hints:
                with_hints(req)
            rid = request_id(ctx)
            self.requests[rid] = req
            fresh = []
            for d in req.ordered_docs:
                key = (ctx.turn, d)
                self.tokens[key] = ctx.tokens([d])
                fresh.append(key)
            blocks = self.history[ctx.session_id] + fresh
            self._prefill(rid, blocks, None)
            self.history[ctx.session_id] = blocks + self._qa(ctx)

    def run(self) -> None:
        for batch in by_turn(self.records):
            if batch[0].turn == 0:
                self._first_turn(batch)
            else:
                self._later_turn(batch)

    def summary(self) -> dict[str, Any]:
        cfg = self.cfg
        out: dict[str, Any] = {
            "requests": len(self.reports),
            "hit_rate": hit_rate(self.reports) if self.reports else 0.0,
            "hit_tokens": sum(r.hit_tokens for r in self.reports),
            "total_tokens": sum(r.total_tokens for r in self.reports),
            "prefilled_tokens": sum(r.miss_tokens for r in self.reports),
            "evicted_tokens": sum(r.evicted_tokens for r in self.reports),
            "dedup_saved_tokens": self.dedup_saved,
            "order_hints": sum(1 for q in self.requests.values() if q.order_hint),
            "index_sync_errors": self.sync_errors,
            "uncacheable_requests": self.uncacheable,
            "toggles": cfg.toggles(),
            "mode": cfg.mode,
            "capacity_tokens": cfg.capacity_tokens,
        }
        if self.indexing:
            out["index"] = self.index.stats()
        if cfg.timings:
            out["index_build_seconds"] = self.build_seconds
        return out


STAGES = (
    ("baseline", {"ordering": False, "scheduling": False, "dedup": False}),
    ("ordering", {"ordering": True, "scheduling": False, "dedup": False}),
    ("scheduling", {"ordering": True, "scheduling": True, "dedup": False}),
    ("dedup", {"ordering": True, "scheduling": True, "dedup": True}),
)


def _stage_deltas(cfg: ExperimentConfig, records, seeds) -> dict[str, Any]:
    """Hit rate and prefilled tokens as each stage is switched on in turn."""
    multi = any(r.turn > 0 for r in records)
    rows, prev = {}, None
    for name, toggles in STAGES:
        if name == "dedup" and not multi:
            continue
        stage = ExperimentConfig(**{**asdict(cfg), "workload": cfg.workload, **toggles, "breakdown": False})
        run = _Run(stage, records, seeds)
        run.run()
        s = run.summary()
        row = {"hit_rate": s["hit_rate"], "prefilled_tokens": s["prefilled_tokens"]}
        if prev is not None:
            row["hit_rate_delta"] = s["hit_rate"] - prev["hit_rate"]
            row["prefilled_delta"] = s["prefilled_tokens"] - prev["prefilled_tokens"]
        rows[name] = row
        prev = row
    return rows


def run_experiment(cfg: ExperimentConfig, records: Optional[Sequence[TraceRecord]] = None,
                   seeds: Optional[Sequence[TraceRecord]] = None) -> ExperimentResult:
    """Replay a workload through the enabled stages and the cache simulator.

    ``records`` and ``seeds`` override the trace sources named in ``cfg``.
    Writes ``requests.csv`` and ``summary.json`` when ``cfg.output_dir`` is set.
    """
    if records is None:
        cfg.validate()
        records = load_records(cfg)
    if seeds is None:
        seeds = load_trace(cfg.seed_trace_path) if cfg.seed_trace_path else ()
    run = _Run(cfg, records, seeds)
    run.run()
    summary = run.summary()
    if cfg.breakdown:
        summary["stages"] = _stage_deltas(cfg, records, seeds)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "requests.csv").write_text(reports_to_csv(run.reports))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(summary, run.reports, run.executed, run.requests, run.index, run.cache)
