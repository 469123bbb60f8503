"""Context index: a tree of cached document prefixes.

The root holds the empty context. Every other node holds a document sequence
that starts with its parent's sequence. Virtual nodes hold shared prefixes of
several contexts; leaves hold one request's full, prefix-first context.

Nodes are addressed by search paths (child indices from the root). Evicted
nodes leave ``None`` tombstones in their parent's child list so the paths of
their siblings never shift.
"""

from __future__ import annotations

import heapq
import logging
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .core import (
    Accessed,
    Appended,
    CacheEvent,
    Context,
    DocId,
    Evicted,
    IndexNode,
    InvalidPathError,
    PreconditionError,
    SearchPath,
)
from .distance import DistanceParams, PositionTable, combine, overlap_stats

log = logging.getLogger(__name__)

EQUIDISTANT_TOL = 1e-12


def contained_prefix(context: Sequence[DocId], docs: set, start: int = 0) -> int:
    """Length of the longest prefix of ``context`` whose docs are all in ``docs``.

    The first ``start`` entries are assumed to be contained already.
    """
    n = start
    while n < len(context) and context[n] in docs:
        n += 1
    return n


def prefix_layout(query: Sequence[DocId], node_context: Sequence[DocId]) -> tuple[DocId, ...]:
    """Shared docs in the node's order, then the rest of ``query`` in its own order."""
    qset = set(query)
    head = tuple(d for d in node_context if d in qset)
    hset = set(head)
    return head + tuple(d for d in query if d not in hset)


class _Cluster:
    __slots__ = ("docs", "members")

    def __init__(self, docs: frozenset, members: list):
        self.docs = docs
        # leaf input indices (int) or nested _Cluster objects, in child order
        self.members = members


class ContextIndex:
    def __init__(self, params: DistanceParams = DistanceParams(), register_tokens: bool = True):
        self.params = params
        # When False, node token counts come only from Appended events.
        self.register_tokens = register_tokens
        self.clock = 0
        self._next_uid = 0
        self.nodes: dict[int, IndexNode] = {}
        self.pruned: set[int] = set()
        self.doc_tokens: dict[DocId, int] = {}
        self._heap: list[tuple[int, int, int]] = []
        self._ghosts: set[int] = set()
        self._inflight: Optional[int] = None  # node of the request being prefilled
        self.root = self._new_node((), None, is_virtual=True)
        self.leaves: list[IndexNode] = []

    # -- node bookkeeping ---------------------------------------------------

    def _new_node(self, context, parent: Optional[IndexNode], is_virtual: bool) -> IndexNode:
        uid = self._next_uid
        self._next_uid += 1
        node = IndexNode(
            context=tuple(context),
            is_virtual=is_virtual,
            uid=uid,
            created=uid,
            parent=parent,
            filled=self.register_tokens,
        )
        self.nodes[uid] = node
        return node

    def _attach(self, parent: IndexNode, child: IndexNode, slot: Optional[int] = None) -> None:
        if slot is None:
            slot = len(parent.children)
            parent.children.append(child)
        else:
            parent.children[slot] = child
        child.parent = parent
        self._repath(child, parent.path + (slot,))

    def _repath(self, node: IndexNode, path: SearchPath) -> None:
        stack = [(node, path)]
        while stack:
            n, p = stack.pop()
            n.path = p
            for i, c in enumerate(n.children):
                if c is not None:
                    stack.append((c, p + (i,)))

    def _segment_tokens(self, context: Sequence[DocId], start: int) -> int:
        return sum(self.doc_tokens[d] for d in context[start:])

    def _register_docs(self, ctx: Context) -> None:
        for d in ctx.docs:
            self.doc_tokens[d] = ctx.token_counts[d]

    def _push(self, node: IndexNode) -> None:
        if node.seq_len > 0:
            heapq.heappush(self._heap, (node.last_access, node.created, node.uid))

    def _stamp(self, node: IndexNode) -> None:
        # Ancestors get strictly later stamps than descendants so LRU
        # eviction drains a branch from its leaves upward.
        n = node
        while n is not None and n is not self.root:
            self.clock += 1
            n.last_access = self.clock
            self._push(n)
            n = n.parent
        if len(self._heap) > 64 and len(self._heap) > 4 * len(self.nodes):
            self._compact_heap()

    def _compact_heap(self) -> None:
        self._heap = [
            (n.last_access, n.created, n.uid)
            for n in self.nodes.values()
            if n.seq_len > 0 and n is not self.root
        ]
        heapq.heapify(self._heap)

    def _note_zero(self, node: IndexNode) -> None:
        if node.seq_len == 0 and node.is_leaf and node.filled and node is not self.root:
            self._ghosts.add(node.uid)

    def _release_inflight(self) -> None:
        node = self.nodes.get(self._inflight) if self._inflight is not None else None
        self._inflight = None
        if node is not None:
            self._note_zero(node)

    def _prune(self, node: IndexNode) -> None:
        """Detach a zero-token leaf and any ancestors it leaves empty."""
        while node is not self.root and node.seq_len == 0 and node.is_leaf:
            parent = node.parent
            parent.children[node.path[-1]] = None
            del self.nodes[node.uid]
            self.pruned.add(node.uid)
            self._ghosts.discard(node.uid)
            node = parent

    # -- construction -------------------------------------------------------

    @classmethod
    def build(
        cls,
        contexts: Sequence[Context],
        params: DistanceParams = DistanceParams(),
        register_tokens: bool = True,
    ) -> "ContextIndex":
        """Agglomerative clustering of ``contexts`` into an index tree.

        Repeatedly merges the closest pair of clusters; a merged cluster is
        represented by the ascending-sorted intersection of its members. Pairs
        with no shared document never merge, so unrelated clusters end up as
        separate children of the root.
        """
        if not contexts:
            raise PreconditionError("build needs at least one context")
        if any(len(c) == 0 for c in contexts):
            raise PreconditionError("build needs non-empty contexts")
        index = cls(params, register_tokens)
        for c in contexts:
            index._register_docs(c)
        top = index._cluster([c.docs for c in contexts])
        index.leaves = [None] * len(contexts)
        for cluster in top:
            index._materialize(index.root, cluster, contexts)
        for leaf in index.leaves:
            index._stamp(leaf)
            # a repeated context adds no tokens beyond its parent
            index._note_zero(leaf)
        return index

    def _cluster(self, rows: list[tuple[DocId, ...]]) -> list:
        n = len(rows)
        clusters: list[Any] = list(range(n))
        sets: list[Optional[frozenset]] = [frozenset(r) for r in rows]
        if n == 1:
            return clusters
        alpha = self.params.alpha
        table = PositionTable(rows)
        inf = np.inf
        dist = np.empty((n, n), dtype=np.float64)
        for i, docs in enumerate(rows):
            dist[i] = table.distances(docs, alpha, disjoint=inf)
            dist[i, i] = inf
        active = np.ones(n, dtype=bool)
        rowmin = np.full(n, inf)
        rowarg = np.full(n, -1, dtype=np.int64)
        stale = np.zeros(n, dtype=bool)

        def refresh(k: int) -> None:
            seg = dist[k, k + 1:]
            if seg.size:
                a = int(np.argmin(seg))
                rowmin[k] = seg[a]
                rowarg[k] = k + 1 + a
            else:
                rowmin[k] = inf
                rowarg[k] = -1
            stale[k] = False

        for k in range(n):
            refresh(k)

        # rowmin[k] is exact for fresh rows and a lower bound for stale rows,
        # so the first fresh argmin is the lexicographically smallest
        # minimum pair.
        while True:
            k = int(np.argmin(rowmin))
            if not np.isfinite(rowmin[k]):
                break
            if stale[k]:
                refresh(k)
                continue
            i, j = k, int(rowarg[k])
            merged = sets[i] & sets[j]
            members = []
            for slot in (i, j):
                c = clusters[slot]
                if isinstance(c, _Cluster) and c.docs == merged:
                    members.extend(c.members)
                else:
                    members.append(c)
            clusters[i] = _Cluster(merged, members)
            clusters[j] = None
            sets[i], sets[j] = merged, None
            active[j] = False
            table.set_row(i, tuple(sorted(merged)))
            table.set_row(j, ())
            dist[j, :] = inf
            dist[:, j] = inf
            rowmin[j] = inf
            stale[j] = False

            vec = table.distances(tuple(sorted(merged)), alpha, disjoint=inf)
            vec[~active] = inf
            vec[i] = inf
            dist[i, :] = vec
            dist[:, i] = vec
            refresh(i)

            lo = np.arange(i)
            new = vec[:i]
            hit = stale[:i] | (rowarg[:i] == i) | (rowarg[:i] == j)
            better = ~hit & ((new < rowmin[:i]) | ((new == rowmin[:i]) & (i < rowarg[:i])))
            rowmin[lo[better]] = new[better]
            rowarg[lo[better]] = i
            stale[lo[hit]] = True
            rowmin[lo[hit]] = np.minimum(rowmin[lo[hit]], new[hit])
            mid = np.arange(i + 1, j)
            stale[mid[rowarg[i + 1:j] == j]] = True

        return [c for c in clusters if c is not None]

    def _materialize(self, parent: IndexNode, cluster, contexts: Sequence[Context]) -> None:
        stack = [(parent, cluster)]
        while stack:
            par, item = stack.pop()
            pset = set(par.context)
            if isinstance(item, _Cluster):
                ctx = par.context + tuple(sorted(item.docs - pset))
                node = self._new_node(ctx, par, is_virtual=True)
            else:
                docs = contexts[item].docs
                ctx = par.context + tuple(d for d in docs if d not in pset)
                node = self._new_node(ctx, par, is_virtual=False)
                self.leaves[item] = node
            if self.register_tokens:
                node.seq_len = self._segment_tokens(ctx, len(par.context))
            self._attach(par, node)
            if isinstance(item, _Cluster):
                stack.extend((node, m) for m in reversed(item.members))

    # -- lookup -------------------------------------------------------------

    def traverse(self, path: Iterable[int]) -> IndexNode:
        node = self.root
        for depth, step in enumerate(path):
            if not isinstance(step, (int, np.integer)) or step < 0 or step >= len(node.children):
                raise InvalidPathError(f"step {step!r} at depth {depth} is out of range")
            node = node.children[step]
            if node is None:
                raise InvalidPathError(f"step {step} at depth {depth} points at an evicted node")
        return node

    def node(self, uid: int) -> Optional[IndexNode]:
        return self.nodes.get(uid)

    def touch(self, node: IndexNode, ctx: Optional[Context] = None) -> None:
        """Refresh ``node`` (and its ancestors) as most recently used."""
        if ctx is not None:
            self._register_docs(ctx)
        self._stamp(node)

    def _distance(self, view: Sequence[DocId], context: Sequence[DocId]) -> float:
        shared, displacement = overlap_stats(view, context)
        if shared == 0:
            return 1.0
        return combine(shared, displacement, max(len(view), len(context)), self.params.alpha)

    def search(self, query: Context | Sequence[DocId]) -> tuple[IndexNode, SearchPath, tuple[DocId, ...]]:
        """Greedy descent towards the node sharing the longest prefix with ``query``.

        At each level the query is laid out prefix-first against the current
        node, then compared with every child. Only children that extend the
        reusable prefix are candidates; among them the longest reusable prefix
        wins, then the smallest distance, then the lowest child index. The
        descent stops at a leaf, when no child extends the prefix, or when all
        children are equidistant.
        """
        qdocs = tuple(query.docs if isinstance(query, Context) else query)
        node, path = self.root, []
        if not qdocs:
            return node, (), ()
        qset = set(qdocs)
        view = qdocs
        while True:
            live = [(i, c) for i, c in enumerate(node.children) if c is not None]
            if not live:
                break
            base = len(node.context)
            scored = [
                (i, c, self._distance(view, c.context), contained_prefix(c.context, qset, base))
                for i, c in live
            ]
            d0 = scored[0][2]
            if len(scored) > 1 and all(abs(s[2] - d0) <= EQUIDISTANT_TOL for s in scored):
                break
            eligible = [s for s in scored if s[3] > base]
            if not eligible:
                break
            i, child, _, reuse = min(eligible, key=lambda s: (-s[3], s[2], s[0]))
            node = child
            path.append(i)
            view = prefix_layout(qdocs, node.context)
            if reuse < len(node.context):
                break
        shared = tuple(d for d in node.context if d in qset)
        return node, tuple(path), shared

    # -- mutation -----------------------------------------------------------

    def insert(
        self,
        query: Context,
        at: IndexNode,
        path: SearchPath,
        docs: Optional[Sequence[DocId]] = None,
    ) -> SearchPath:
        """Register ``query`` below the node returned by :meth:`search`.

        ``docs`` is the prefix-first layout to store; it defaults to
        :func:`prefix_layout` against ``at``. A query that only covers part of
        ``at``'s context splits ``at`` under a new virtual node holding the
        covered prefix.
        """
        if len(query) == 0:
            raise PreconditionError("cannot insert an empty context")
        try:
            current = self.traverse(path)
        except InvalidPathError as exc:
            raise InvalidPathError(f"stale search path {list(path)}: {exc}") from exc
        if current is not at:
            raise InvalidPathError(f"stale search path {list(path)}: tree changed since search")
        self._register_docs(query)
        qset = set(query.docs)
        ordered = tuple(docs) if docs is not None else prefix_layout(query.docs, at.context)
        if sorted(ordered) != sorted(query.docs):
            raise PreconditionError("insert docs must be a permutation of the query")

        covered = contained_prefix(at.context, qset)
        if at is self.root or (covered == len(at.context) and not at.is_leaf):
            parent = at
        elif covered <= len(at.parent.context):
            parent = at.parent
        else:
            parent = self._split(at, covered)

        if ordered[: len(parent.context)] != parent.context:
            raise PreconditionError(
                f"layout {list(ordered)} does not start with parent prefix {list(parent.context)}"
            )
        leaf = self._new_node(ordered, parent, is_virtual=False)
        if self.register_tokens:
            leaf.seq_len = self._segment_tokens(ordered, len(parent.context))
        self._attach(parent, leaf)
        self._stamp(leaf)
        self._note_zero(leaf)
        return leaf.path

    def _split(self, node: IndexNode, keep: int) -> IndexNode:
        """Put a virtual node holding ``node.context[:keep]`` above ``node``."""
        parent = node.parent
        slot = node.path[-1]
        virtual = self._new_node(node.context[:keep], parent, is_virtual=True)
        moved = min(node.seq_len, self._segment_tokens(node.context[:keep], len(parent.context)))
        node.seq_len -= moved
        virtual.seq_len = moved
        virtual.filled = node.filled
        virtual.last_access = node.last_access
        self._attach(parent, virtual, slot)
        self._attach(virtual, node)
        self._push(virtual)
        self._note_zero(node)
        return virtual

    def apply_cache_event(self, event: CacheEvent) -> None:
        if isinstance(event, Evicted):
            if event.n_tokens < 0:
                raise PreconditionError("evicted token count must be non-negative")
            self._evict(event.n_tokens)
        elif isinstance(event, Appended):
            if event.n_tokens < 0:
                raise PreconditionError("appended token count must be non-negative")
            node = self.traverse(event.path)
            if node is self.root:
                raise InvalidPathError("cannot append tokens to the root")
            node.seq_len += event.n_tokens
            node.filled = True
            self._release_inflight()
            self._stamp(node)
            self._note_zero(node)
        elif isinstance(event, Accessed):
            node = self.traverse(event.path)
            # the engine pins a request's node until its tokens are appended,
            # so evictions in between may drain it but never detach it
            self._release_inflight()
            self._inflight = node.uid
            self._ghosts.discard(node.uid)
            self._stamp(node)
        else:
            raise PreconditionError(f"unknown cache event {event!r}")

    def _evict(self, n_tokens: int) -> int:
        remaining = n_tokens
        while remaining > 0 and self._heap:
            stamp, _, uid = heapq.heappop(self._heap)
            node = self.nodes.get(uid)
            if node is None or node.seq_len <= 0 or node.last_access != stamp:
                continue
            take = min(remaining, node.seq_len)
            node.seq_len -= take
            remaining -= take
            if node.seq_len > 0:
                self._push(node)
            elif node.is_leaf and uid != self._inflight:
                self._prune(node)
            else:
                self._note_zero(node)
        if n_tokens > 0:
            for uid in sorted(self._ghosts):
                ghost = self.nodes.get(uid)
                if ghost is not None and ghost.seq_len == 0 and ghost.is_leaf and uid != self._inflight:
                    self._prune(ghost)
            self._ghosts = {self._inflight} & self._ghosts
        if remaining:
            log.debug("eviction of %d tokens exceeded indexed tokens by %d", n_tokens, remaining)
        return n_tokens - remaining

    # -- inspection ---------------------------------------------------------

    def iter_nodes(self) -> Iterator[IndexNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(c for c in reversed(node.children) if c is not None)

    def total_tokens(self) -> int:
        return sum(n.seq_len for n in self.nodes.values())

    def active_nodes(self) -> set[int]:
        """Uids the access heap would yield: live nodes holding tokens."""
        return {
            uid
            for _, _, uid in self._heap
            if uid in self.nodes and self.nodes[uid].seq_len > 0
        }

    def height(self) -> int:
        return max(len(n.path) for n in self.iter_nodes())

    def stats(self) -> dict[str, Any]:
        nodes = list(self.iter_nodes())
        return {
            "nodes": len(nodes) - 1,
            "leaves": sum(1 for n in nodes if n.is_leaf and n is not self.root),
            "virtual": sum(1 for n in nodes if n.is_virtual and n is not self.root),
            "height": max(len(n.path) for n in nodes),
            "tokens": self.total_tokens(),
            "pruned": len(self.pruned),
        }

    # -- snapshot -----------------------------------------------------------

    def to_json(self) -> dict[str, Any]:
        nodes = []
        for n in self.iter_nodes():
            nodes.append(
                {
                    "uid": n.uid,
                    "parent": None if n.parent is None else n.parent.uid,
                    "slot": n.path[-1] if n.path else None,
                    "n_slots": len(n.children),
                    "context": list(n.context),
                    "seq_len": n.seq_len,
                    "multi_turn": n.multi_turn,
                    "last_access": n.last_access,
                    "is_virtual": n.is_virtual,
                    "filled": n.filled,
                }
            )
        return {
            "alpha": self.params.alpha,
            "register_tokens": self.register_tokens,
            "clock": self.clock,
            "next_uid": self._next_uid,
            "doc_tokens": {str(d): t for d, t in sorted(self.doc_tokens.items())},
            "pruned": sorted(self.pruned),
            "leaves": [None if leaf is None or leaf.uid not in self.nodes else leaf.uid for leaf in self.leaves],
            "ghosts": sorted(self._ghosts),
            "nodes": nodes,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ContextIndex":
        index = cls(
            DistanceParams(float(data["alpha"]), allow_out_of_band=True),
            bool(data.get("register_tokens", True)),
        )
        index.nodes.clear()
        index.clock = int(data["clock"])
        index._next_uid = int(data["next_uid"])
        index.doc_tokens = {int(k): int(v) for k, v in data["doc_tokens"].items()}
        index.pruned = set(int(u) for u in data.get("pruned", ()))
        index._ghosts = set(int(u) for u in data.get("ghosts", ()))
        for rec in data["nodes"]:
            node = IndexNode(
                context=tuple(rec["context"]),
                seq_len=int(rec["seq_len"]),
                multi_turn=bool(rec["multi_turn"]),
                children=[None] * int(rec["n_slots"]),
                last_access=int(rec["last_access"]),
                is_virtual=bool(rec["is_virtual"]),
                uid=int(rec["uid"]),
                created=int(rec["uid"]),
                filled=bool(rec["filled"]),
            )
            index.nodes[node.uid] = node
            if rec["parent"] is None:
                index.root = node
            else:
                parent = index.nodes[int(rec["parent"])]
                parent.children[int(rec["slot"])] = node
                node.parent = parent
        index._repath(index.root, ())
        index.leaves = [None if u is None else index.nodes[u] for u in data.get("leaves", ())]
        index._compact_heap()
        return index
