"""Cache-aware reordering of retrieved contexts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .core import Context, DocId, IndexNode, SearchPath
from .index import ContextIndex, prefix_layout


@dataclass
class OrderedContext:
    docs: tuple[DocId, ...]
    matched_prefix_len: int
    path: SearchPath
    original_rank: dict[DocId, int] = field(default_factory=dict)
    source: Context | None = None
    # uid of the index node holding this context; its path can shift later
    uid: int | None = None

    @property
    def changed(self) -> bool:
        return self.source is not None and self.docs != self.source.docs


def _ranks(ctx: Context) -> dict[DocId, int]:
    return {d: i for i, d in enumerate(ctx.docs)}


def _same_leaf(node: IndexNode, ctx: Context) -> bool:
    return node.is_leaf and not node.is_virtual and len(node.context) == len(ctx) and set(node.context) == set(ctx.docs)


def order_context(index: ContextIndex, ctx: Context) -> OrderedContext:
    """Lead ``ctx`` with its best cached prefix and register it in ``index``.

    A context whose documents exactly match an indexed leaf reuses that leaf
    rather than adding a zero-length twin.
    """
    node, path, shared = index.search(ctx)
    if shared:
        docs = prefix_layout(ctx.docs, node.context)
    else:
        docs = ctx.docs
    if _same_leaf(node, ctx):
        index.touch(node, ctx)
        return OrderedContext(node.context, len(ctx), node.path, _ranks(ctx), ctx, node.uid)
    new_path = index.insert(ctx, node, path, docs=docs)
    leaf = index.traverse(new_path)
    return OrderedContext(docs, len(shared), new_path, _ranks(ctx), ctx, leaf.uid)


def order_batch(index: ContextIndex, batch: Sequence[Context]) -> list[OrderedContext]:
    out = [order_context(index, ctx) for ctx in batch]
    refresh_paths(index, out)
    return out


def refresh_paths(index: ContextIndex, items: Sequence[OrderedContext]) -> None:
    """Re-read each item's path; later insertions may have split its ancestors."""
    for item in items:
        node = index.node(item.uid) if item.uid is not None else None
        if node is not None:
            item.path = node.path


def inherit(index: ContextIndex, contexts: Sequence[Context]) -> list[OrderedContext]:
    """Ordered views of the contexts an index was built from.

    Built leaves already store their context prefix-first, so each one simply
    inherits its parent's prefix.
    """
    out = []
    for ctx, leaf in zip(contexts, index.leaves):
        out.append(OrderedContext(leaf.context, len(leaf.parent.context), leaf.path, _ranks(ctx), ctx, leaf.uid))
    return out
