"""Positional overlap distance between retrieved contexts.

    d(a, b) = 1 - |S| / max(|a|, |b|) + alpha * sum_{k in S} |pos_a(k) - pos_b(k)| / |S|

where ``S`` is the set of shared documents and positions are 0-based. When
``S`` is empty the positional term is 0, so disjoint contexts sit at exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import Context, DocId, PreconditionError

ALPHA_MIN = 0.001
ALPHA_MAX = 0.01
DEFAULT_ALPHA = 0.005

Docs = Union[Context, Sequence[DocId]]


@dataclass(frozen=True)
class DistanceParams:
    alpha: float = DEFAULT_ALPHA
    allow_out_of_band: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise PreconditionError("alpha must be non-negative")
        if not self.allow_out_of_band and not (ALPHA_MIN <= self.alpha <= ALPHA_MAX):
            raise PreconditionError(
                f"alpha={self.alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]; "
                "pass allow_out_of_band=True to override"
            )


def _docs(x: Docs) -> Sequence[DocId]:
    return x.docs if isinstance(x, Context) else x


def combine(shared, displacement, longest, alpha: float):
    # Shared by the scalar and vectorised paths so both round identically.
    return 1.0 - shared / longest + alpha * (displacement / shared)


def overlap_stats(a: Sequence[DocId], b: Sequence[DocId]) -> tuple[int, int]:
    """Return (shared count, summed absolute displacement) for two doc lists."""
    pos_b = {d: i for i, d in enumerate(b)}
    shared = 0
    displacement = 0
    for i, d in enumerate(a):
        j = pos_b.get(d)
        if j is not None:
            shared += 1
            displacement += abs(i - j)
    return shared, displacement


def context_distance(a: Docs, b: Docs, params: DistanceParams = DistanceParams()) -> float:
    a, b = _docs(a), _docs(b)
    if not a or not b:
        raise PreconditionError("context_distance needs two non-empty contexts")
    shared, displacement = overlap_stats(a, b)
    if shared == 0:
        return 1.0
    return combine(shared, displacement, max(len(a), len(b)), params.alpha)


class PositionTable:
    """Dense (rows x docs) table of positions, -1 where a doc is absent.

    Lets one context be compared against every row with a column gather
    instead of a Python loop per pair.
    """

    def __init__(self, rows: Sequence[Sequence[DocId]]):
        columns: dict[DocId, int] = {}
        for docs in rows:
            for d in docs:
                columns.setdefault(d, len(columns))
        self.columns = columns
        width = max(1, len(columns))
        longest = max((len(r) for r in rows), default=0)
        dtype = np.int16 if longest < np.iinfo(np.int16).max else np.int32
        self.pos = np.full((len(rows), width), -1, dtype=dtype)
        self.lengths = np.zeros(len(rows), dtype=np.int64)
        for i, docs in enumerate(rows):
            self.set_row(i, docs)

    def set_row(self, i: int, docs: Sequence[DocId]) -> None:
        self.pos[i, :] = -1
        if docs:
            cols = [self.columns[d] for d in docs]
            self.pos[i, cols] = np.arange(len(docs), dtype=self.pos.dtype)
        self.lengths[i] = len(docs)

    def compare(self, docs: Sequence[DocId]) -> tuple[np.ndarray, np.ndarray]:
        """Shared counts and displacement sums of ``docs`` against every row.

        Docs without a column appear in no row and are skipped.
        """
        known = [(j, self.columns[d]) for j, d in enumerate(docs) if d in self.columns]
        qpos = np.array([j for j, _ in known], dtype=np.int64)
        cols = np.array([c for _, c in known], dtype=np.int64)
        gathered = self.pos[:, cols].astype(np.int64)
        present = gathered >= 0
        shared = present.sum(axis=1)
        offsets = np.abs(gathered - qpos)
        displacement = np.where(present, offsets, 0).sum(axis=1)
        return shared, displacement

    def distances(self, docs: Sequence[DocId], alpha: float, disjoint: float = 1.0) -> np.ndarray:
        shared, displacement = self.compare(docs)
        longest = np.maximum(self.lengths, len(docs))
        out = np.full(len(shared), disjoint, dtype=np.float64)
        hit = shared > 0
        out[hit] = combine(shared[hit], displacement[hit], longest[hit], alpha)
        return out


def pairwise_distances(contexts: Sequence[Docs], params: DistanceParams = DistanceParams()) -> np.ndarray:
    rows = [tuple(_docs(c)) for c in contexts]
    if len(rows) < 2:
        raise PreconditionError("pairwise_distances needs at least two contexts")
    if any(not r for r in rows):
        raise PreconditionError("pairwise_distances needs non-empty contexts")
    table = PositionTable(rows)
    out = np.empty((len(rows), len(rows)), dtype=np.float64)
    for i, docs in enumerate(rows):
        out[i] = table.distances(docs, params.alpha)
    np.fill_diagonal(out, 0.0)
    return out
