"""Document-granularity prefix cache with a token budget and LRU eviction.

Stands in for an inference engine's KV prefix cache. Each trie edge is one
block (a document id, or any hashable key) carrying that block's token count.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Optional, Sequence

from .core import DEFAULT_DOC_TOKENS, Accessed, Appended, CacheEvent, Evicted, PreconditionError, SearchPath, event_to_dict

REPORT_COLUMNS = ("request_id", "hit_tokens", "miss_tokens", "total_tokens", "evicted_tokens")


class OverCapacityError(ValueError):
    def __init__(self, needed: int, capacity: int):
        self.needed = needed
        self.capacity = capacity
        self.shortfall = needed - capacity
        super().__init__(f"request needs {needed} tokens but capacity is {capacity} (short by {self.shortfall})")


@dataclass(frozen=True)
class CacheConfig:
    capacity_tokens: int
    policy: str = "lru"

    def __post_init__(self):
        if self.capacity_tokens <= 0:
            raise PreconditionError("capacity_tokens must be positive")
        if self.policy != "lru":
            raise PreconditionError(f"unsupported eviction policy {self.policy!r}")


@dataclass
class PrefillReport:
    hit_tokens: int
    miss_tokens: int
    total_tokens: int
    evicted_tokens: int = 0
    events: list[CacheEvent] = field(default_factory=list)
    request_id: Any = None

    def row(self) -> dict[str, Any]:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


class _Node:
    __slots__ = ("key", "tokens", "parent", "children", "last_access", "uid", "depth", "tracked")

    def __init__(self, key, tokens: int, parent: Optional["_Node"], uid: int, tracked: bool = False):
        self.key = key
        self.tokens = tokens
        self.parent = parent
        self.children: dict[Hashable, _Node] = {}
        self.last_access = 0
        self.uid = uid
        self.depth = 0 if parent is None else parent.depth + 1
        self.tracked = tracked


class PrefixCache:
    def __init__(self, config: CacheConfig):
        self.config = config
        self.root = _Node(None, 0, None, 0)
        self.resident_tokens = 0
        self.scaffold_tokens = 0
        self.clock = 0
        self._uids = itertools.count(1)
        self._heap: list[tuple[int, int, int, _Node]] = []
        self._n_nodes = 0
        # tokens of blocks prefilled on behalf of indexed requests
        self.tracked_tokens = 0

    @property
    def capacity(self) -> int:
        return self.config.capacity_tokens

    def __len__(self) -> int:
        return self._n_nodes

    def _push_leaf(self, node: _Node) -> None:
        heapq.heappush(self._heap, (node.last_access, -node.depth, node.uid, node))

    def _valid(self, entry) -> bool:
        stamp, _, _, node = entry
        return node.parent is not None and not node.children and node.last_access == stamp

    def _evict_until(self, free_needed: int, pinned: set[int]) -> tuple[int, int]:
        """Evict LRU leaves outside ``pinned`` until ``free_needed`` tokens are free.

        Returns (all evicted tokens, evicted tokens of tracked blocks).
        """
        evicted = tracked = 0
        skipped = []
        while self.capacity - self.resident_tokens < free_needed and self._heap:
            entry = heapq.heappop(self._heap)
            if not self._valid(entry):
                continue
            node = entry[3]
            if node.uid in pinned:
                skipped.append(entry)
                continue
            parent = node.parent
            del parent.children[node.key]
            node.parent = None
            self.resident_tokens -= node.tokens
            self._n_nodes -= 1
            evicted += node.tokens
            if node.tracked:
                tracked += node.tokens
                self.tracked_tokens -= node.tokens
            if parent is not self.root and not parent.children:
                self._push_leaf(parent)
        for entry in skipped:
            heapq.heappush(self._heap, entry)
        return evicted, tracked

    def match(self, blocks: Sequence[Hashable]) -> list[_Node]:
        """Resident nodes along the longest cached prefix of ``blocks``."""
        out, node = [], self.root
        for b in blocks:
            node = node.children.get(b)
            if node is None:
                break
            out.append(node)
        return out

    def prefill(
        self,
        blocks: Sequence[Hashable],
        tokens: Mapping[Hashable, int] | int | None = None,
        scaffold_tokens: int = 0,
        path: Optional[SearchPath] = None,
        request_id: Any = None,
    ) -> PrefillReport:
        """Run one request through the cache.

        ``path`` is the request's location in a context index; when given, the
        report carries the Accessed/Evicted/Appended events that keep the index
        in step. Evicted counts only blocks that were prefilled with a path, so
        untracked traffic never drains the index. Scaffold tokens (system
        prompt) live in a pinned node that is never evicted or reported.
        """
        if len(set(blocks)) != len(blocks):
            raise PreconditionError("prefill blocks must be distinct")
        if scaffold_tokens < 0:
            raise PreconditionError("scaffold_tokens must be non-negative")
        sizes = []
        for b in blocks:
            if tokens is None:
                n = DEFAULT_DOC_TOKENS
            elif isinstance(tokens, int):
                n = tokens
            else:
                n = tokens.get(b, DEFAULT_DOC_TOKENS)
            if n <= 0:
                raise PreconditionError(f"token count for {b!r} must be positive")
            sizes.append(n)

        scaffold_hit = scaffold_tokens if self.scaffold_tokens >= scaffold_tokens else 0
        extra_scaffold = max(0, scaffold_tokens - self.scaffold_tokens)
        needed = max(self.scaffold_tokens, scaffold_tokens) + sum(sizes)
        if needed > self.capacity:
            raise OverCapacityError(needed, self.capacity)

        self.clock += 1
        matched = self.match(blocks)
        for node in matched:
            node.last_access = self.clock
        if matched and not matched[-1].children:
            self._push_leaf(matched[-1])
        hit = sum(sizes[: len(matched)])
        miss_sizes = sizes[len(matched):]
        miss = sum(miss_sizes)

        evicted, evicted_tracked = self._evict_until(miss + extra_scaffold, {n.uid for n in matched})
        self.scaffold_tokens += extra_scaffold
        self.resident_tokens += extra_scaffold

        node = matched[-1] if matched else self.root
        for b, n in zip(blocks[len(matched):], miss_sizes):
            child = _Node(b, n, node, next(self._uids), path is not None)
            child.last_access = self.clock
            node.children[b] = child
            node = child
            self._n_nodes += 1
        self.resident_tokens += miss
        if path is not None:
            self.tracked_tokens += miss
        if miss_sizes:
            self._push_leaf(node)

        events: list[CacheEvent] = []
        if path is not None:
            events.append(Accessed(tuple(path)))
        if evicted_tracked:
            events.append(Evicted(evicted_tracked))
        if path is not None and miss:
            events.append(Appended(tuple(path), miss))
        return PrefillReport(
            hit_tokens=hit + scaffold_hit,
            miss_tokens=miss + scaffold_tokens - scaffold_hit,
            total_tokens=sum(sizes) + scaffold_tokens,
            evicted_tokens=evicted,
            events=events,
            request_id=request_id,
        )

    def check(self) -> None:
        """Recount resident tokens from the trie; raises on any drift."""
        total, count, stack = 0, 0, list(self.root.children.values())
        while stack:
            n = stack.pop()
            total += n.tokens
            count += 1
            stack.extend(n.children.values())
        if total + self.scaffold_tokens != self.resident_tokens or count != self._n_nodes:
            raise AssertionError(f"resident {self.resident_tokens} != trie {total} + scaffold {self.scaffold_tokens}")
        if self.resident_tokens > self.capacity:
            raise AssertionError(f"resident {self.resident_tokens} over capacity {self.capacity}")


def hit_rate(reports: Iterable[PrefillReport]) -> float:
    hit = total = n = 0
    for r in reports:
        hit += r.hit_tokens
        total += r.total_tokens
        n += 1
    if n == 0:
        raise PreconditionError("hit_rate needs at least one report")
    return hit / total if total else 0.0


def reports_to_csv(reports: Iterable[PrefillReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports: Iterable[PrefillReport], events: bool = False) -> str:
    rows = []
    for r in reports:
        row = r.row()
        if events:
            row["events"] = [event_to_dict(e) for e in r.events]
        rows.append(row)
    return json.dumps(rows, sort_keys=True)
