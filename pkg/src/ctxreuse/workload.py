"""Synthetic retrieval workloads and NDJSON trace files.

Documents get Zipf popularity; each retrieval draws ``k`` distinct documents
and orders them by popularity times per-query noise, so popular documents
recur across sessions in varying orders. Later turns of a session re-retrieve
a fixed fraction of the session's history.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .core import DEFAULT_DOC_TOKENS, Context, DocId, PreconditionError

STRING_ID_BASE = 1 << 32


class TraceParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {msg}")


class TraceValidationError(ValueError):
    def __init__(self, session_id: str, turn: Any, msg: str):
        self.session_id = session_id
        self.turn = turn
        super().__init__(f"session {session_id!r} turn {turn}: {msg}")


@dataclass(frozen=True)
class WorkloadSpec:
    n_docs: int
    n_sessions: int
    turns_per_session: int = 1
    k: int = 15
    zipf_s: float = 1.0
    intra_session_overlap: float = 0.0
    seed: int = 0
    doc_tokens: int = DEFAULT_DOC_TOKENS
    # sigma of the lognormal noise multiplying popularity when ranking a retrieval
    order_jitter: float = 1.0

    def validate(self) -> None:
        for name in ("n_docs", "n_sessions", "turns_per_session", "k", "doc_tokens"):
            if getattr(self, name) <= 0:
                raise PreconditionError(f"{name} must be positive")
        if self.k > self.n_docs:
            raise PreconditionError(f"k={self.k} exceeds n_docs={self.n_docs}")
        if self.zipf_s < 0:
            raise PreconditionError("zipf_s must be non-negative")
        if not 0.0 <= self.intra_session_overlap <= 1.0:
            raise PreconditionError("intra_session_overlap must lie in [0, 1]")
        if self.order_jitter < 0:
            raise PreconditionError("order_jitter must be non-negative")
        if self.turns_per_session > 1:
            fresh = self.k - round(self.intra_session_overlap * self.k)
            worst_history = self.k + (self.turns_per_session - 2) * fresh
            if worst_history + fresh > self.n_docs:
                raise PreconditionError("corpus too small for fresh documents in every turn")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TraceRecord:
    session_id: str
    turn: int
    retrieved: tuple[DocId, ...]
    doc_tokens: Mapping[DocId, int] = field(default_factory=dict)
    query: Optional[str] = None

    def context(self) -> Context:
        return Context.of(
            self.retrieved,
            {d: self.doc_tokens.get(d, DEFAULT_DOC_TOKENS) for d in self.retrieved},
            session_id=self.session_id,
            turn=self.turn,
        )


# -- distributions -----------------------------------------------------------


def zipf_weights(n: int, s: float) -> np.ndarray:
    """Normalized popularity of ranks 1..n."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def draw_zipf(n: int, s: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent ranks in 1..n (with replacement)."""
    return rng.choice(np.arange(1, n + 1), size=size, p=zipf_weights(n, s))


def ks_distance(samples: np.ndarray, n: int, s: float) -> float:
    """Kolmogorov-Smirnov distance between sampled ranks and Zipf(n, s)."""
    counts = np.bincount(samples, minlength=n + 1)[1:]
    emp = np.cumsum(counts) / len(samples)
    return float(np.max(np.abs(emp - np.cumsum(zipf_weights(n, s)))))


def _gumbel_top_k(logw: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # weighted sampling without replacement
    keys = logw + rng.gumbel(size=logw.shape)
    return np.argpartition(-keys, k - 1)[:k] if k < len(keys) else np.arange(len(keys))


# -- generation --------------------------------------------------------------


def generate(spec: WorkloadSpec) -> list[TraceRecord]:
    """Records ordered by session, then turn."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    corpus_ss, *session_ss = root.spawn(spec.n_sessions + 1)
    perm = np.random.default_rng(corpus_ss).permutation(spec.n_docs)
    pop = np.empty(spec.n_docs)
    pop[perm] = zipf_weights(spec.n_docs, spec.zipf_s)  # pop[doc] by popularity rank
    logpop = np.log(pop)
    n_keep = round(spec.intra_session_overlap * spec.k)
    width = len(str(spec.n_sessions - 1))
    out = []
    for s, ss in enumerate(session_ss):
        rng = np.random.default_rng(ss)
        sid = f"s{s:0{width}d}"
        history: list[int] = []
        in_history = np.zeros(spec.n_docs, dtype=bool)
        for t in range(spec.turns_per_session):
            if t == 0:
                chosen = _gumbel_top_k(logpop, spec.k, rng)
            else:
                hist = np.asarray(history)
                kept = hist[_gumbel_top_k(logpop[hist], n_keep, rng)] if n_keep else hist[:0]
                masked = np.where(in_history, -np.inf, logpop)
                fresh = _gumbel_top_k(masked, spec.k - n_keep, rng) if spec.k > n_keep else hist[:0]
                chosen = np.concatenate([kept, fresh])
            score = logpop[chosen] + spec.order_jitter * rng.standard_normal(len(chosen))
            docs = tuple(int(d) for d in chosen[np.lexsort((chosen, -score))])
            for d in docs:
                if not in_history[d]:
                    in_history[d] = True
                    history.append(d)
            out.append(TraceRecord(sid, t, docs, {d: spec.doc_tokens for d in docs}))
    return out


def sessions(records: Iterable[TraceRecord]) -> dict[str, list[TraceRecord]]:
    out: dict[str, list[TraceRecord]] = {}
    for r in records:
        out.setdefault(r.session_id, []).append(r)
    for recs in out.values():
        recs.sort(key=lambda r: r.turn)
    return out


def by_turn(records: Iterable[TraceRecord]) -> list[list[TraceRecord]]:
    """Batches of records sharing a turn number, in input order within a batch."""
    batches: dict[int, list[TraceRecord]] = {}
    for r in records:
        batches.setdefault(r.turn, []).append(r)
    return [batches[t] for t in sorted(batches)]


# -- metrics -----------------------------------------------------------------


def doc_frequencies(records: Iterable[TraceRecord]) -> dict[DocId, int]:
    freq: dict[DocId, int] = {}
    for r in records:
        for d in r.retrieved:
            freq[d] = freq.get(d, 0) + 1
    return freq


def top_share(records: Sequence[TraceRecord], n_docs: int, fraction: float = 0.2) -> float:
    """Share of all retrieved slots taken by the ``fraction`` most frequent docs."""
    counts = sorted(doc_frequencies(records).values(), reverse=True)
    top = max(1, math.ceil(fraction * n_docs))
    total = sum(counts)
    return sum(counts[:top]) / total if total else 0.0


def turn_overlaps(records: Iterable[TraceRecord]) -> list[float]:
    """For each turn >= 1, the fraction of its docs seen earlier in the session."""
    out = []
    for recs in sessions(records).values():
        seen: set = set()
        for r in recs:
            if r.turn >= 1:
                out.append(sum(d in seen for d in r.retrieved) / len(r.retrieved))
            seen.update(r.retrieved)
    return out


def mean_pairwise_overlap(records: Sequence[TraceRecord]) -> float:
    """Mean |a & b| over all pairs of retrievals."""
    n = len(records)
    if n < 2:
        raise PreconditionError("need at least two records")
    freq = np.array(list(doc_frequencies(records).values()), dtype=np.float64)
    # each doc retrieved c times contributes c*(c-1)/2 overlapping pairs
    return float((freq * (freq - 1) / 2).sum() / (n * (n - 1) / 2))


def calibrate_zipf_s(
    spec: WorkloadSpec, target: float, fraction: float = 0.2, lo: float = 0.0, hi: float = 3.0, iters: int = 20
) -> float:
    """Smallest skew (to bisection precision) whose trace has top_share >= target."""
    def share(s: float) -> float:
        return top_share(generate(_with(spec, zipf_s=s)), spec.n_docs, fraction)

    if share(hi) < target:
        raise PreconditionError(f"target share {target} unreachable with zipf_s <= {hi}")
    for _ in range(iters):
        mid = (lo + hi) / 2
        if share(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def _with(spec: WorkloadSpec, **changes) -> WorkloadSpec:
    d = spec.to_dict()
    d.update(changes)
    return WorkloadSpec(**d)


# -- trace files -------------------------------------------------------------

_CANONICAL_INT = re.compile(r"^(0|[1-9][0-9]*)$")


class Interner:
    """Maps trace doc ids (strings) to integer DocIds and back.

    Canonical decimal strings map to their value; anything else gets an id
    at or above ``STRING_ID_BASE``.
    """

    def __init__(self):
        self.ids: dict[str, DocId] = {}
        self.names: dict[DocId, str] = {}

    def intern(self, raw: Any) -> DocId:
        if isinstance(raw, bool):
            raise TypeError("doc id cannot be a boolean")
        if isinstance(raw, int):
            if not 0 <= raw < STRING_ID_BASE:
                raise ValueError(f"integer doc id {raw} out of range")
            return raw
        if not isinstance(raw, str):
            raise TypeError(f"doc id must be a string, got {type(raw).__name__}")
        if _CANONICAL_INT.match(raw) and int(raw) < STRING_ID_BASE:
            return int(raw)
        doc = self.ids.get(raw)
        if doc is None:
            doc = STRING_ID_BASE + len(self.ids)
            self.ids[raw] = doc
            self.names[doc] = raw
        return doc

    def name(self, doc: DocId) -> str:
        return self.names.get(doc, str(doc))

    def to_json(self) -> dict[str, int]:
        return dict(self.ids)

    @classmethod
    def from_json(cls, data: Mapping[str, int]) -> "Interner":
        it = cls()
        for raw, doc in sorted(data.items(), key=lambda kv: kv[1]):
            it.ids[raw] = int(doc)
            it.names[int(doc)] = raw
        return it


def record_to_json(r: TraceRecord, interner: Optional[Interner] = None) -> str:
    name = interner.name if interner else str
    obj: dict[str, Any] = {
        "session_id": r.session_id,
        "turn": r.turn,
        "retrieved": [name(d) for d in r.retrieved],
        "doc_tokens": {name(d): n for d, n in r.doc_tokens.items()},
    }
    if r.query is not None:
        obj["query"] = r.query
    return json.dumps(obj, ensure_ascii=False)


def save_trace(records: Iterable[TraceRecord], path: str | Path, interner: Optional[Interner] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(record_to_json(r, interner) + "\n")


def parse_record(obj: Any, line_no: int, interner: Interner) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceParseError(line_no, "expected a JSON object")
    try:
        sid, turn, retrieved = obj["session_id"], obj["turn"], obj["retrieved"]
    except KeyError as exc:
        raise TraceParseError(line_no, f"missing field {exc.args[0]!r}") from None
    raw_tokens = obj.get("doc_tokens", {})
    if not isinstance(sid, str):
        raise TraceParseError(line_no, "session_id must be a string")
    if isinstance(turn, bool) or not isinstance(turn, int):
        raise TraceParseError(line_no, "turn must be an integer")
    if not isinstance(retrieved, list) or not isinstance(raw_tokens, dict):
        raise TraceParseError(line_no, "retrieved must be an array and doc_tokens an object")
    query = obj.get("query")
    if query is not None and not isinstance(query, str):
        raise TraceParseError(line_no, "query must be a string")
    try:
        docs = tuple(interner.intern(d) for d in retrieved)
        tokens = {}
        for d, n in raw_tokens.items():
            if isinstance(n, bool) or not isinstance(n, int):
                raise TypeError(f"token count for {d!r} must be an integer")
            tokens[interner.intern(d)] = n
    except (TypeError, ValueError) as exc:
        raise TraceParseError(line_no, str(exc)) from None
    if turn < 0:
        raise TraceValidationError(sid, turn, "turn must be non-negative")
    if not docs:
        raise TraceValidationError(sid, turn, "retrieved is empty")
    if len(set(docs)) != len(docs):
        raise TraceValidationError(sid, turn, "retrieved contains a duplicate doc id")
    bad = [d for d, n in tokens.items() if n <= 0]
    if bad:
        raise TraceValidationError(sid, turn, f"non-positive token count for {interner.name(bad[0])}")
    return TraceRecord(sid, turn, docs, {d: tokens.get(d, DEFAULT_DOC_TOKENS) for d in docs}, query)


def iter_trace(path: str | Path, interner: Optional[Interner] = None) -> Iterator[TraceRecord]:
    interner = interner if interner is not None else Interner()
    next_turn: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(line_no, exc.msg) from None
            rec = parse_record(obj, line_no, interner)
            expected = next_turn.get(rec.session_id, 0)
            if rec.turn != expected:
                raise TraceValidationError(rec.session_id, rec.turn, f"expected turn {expected}")
            next_turn[rec.session_id] = expected + 1
            yield rec


def load_trace(path: str | Path, interner: Optional[Interner] = None) -> list[TraceRecord]:
    return list(iter_trace(path, interner))


# Reference workload for hit-rate experiments. zipf_s was found with
# calibrate_zipf_s(target=0.65): the top 20% of documents take 65% of all
# retrieved slots. order_jitter 2.0 gives each query its own ordering of
# largely overlapping sets.
CALIBRATED = WorkloadSpec(
    n_docs=2000, n_sessions=2000, turns_per_session=1, k=15, zipf_s=0.802, seed=2024, order_jitter=2.0
)
CALIBRATED_CAPACITY = 64 * 1024

# Multi-turn reference: 5 turns, 40% of each later turn re-retrieved from history.
MULTI_TURN = WorkloadSpec(
    n_docs=2000, n_sessions=200, turns_per_session=5, k=15, zipf_s=0.802, intra_session_overlap=0.4,
    seed=2024, order_jitter=2.0,
)

PRESETS = {"calibrated": CALIBRATED, "multi-turn": MULTI_TURN}
