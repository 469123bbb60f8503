"""Execution order for a batch of ordered contexts.

Requests are grouped by the first step of their search path (one group per
top-level branch of the index) and each group runs longest path first, so
requests sharing a cached prefix run back to back before it can be evicted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class Schedule:
    order: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]

    def apply(self, items: Sequence) -> list:
        return [items[i] for i in self.order]


def schedule(batch: Sequence) -> Schedule:
    """Schedule items carrying a ``path`` attribute (a tuple of child indices)."""
    groups: dict[object, list[int]] = {}
    for pos, item in enumerate(batch):
        path = tuple(item.path)
        # no-overlap contexts share nothing, so each runs on its own
        key = path[0] if path else ("solo", pos)
        groups.setdefault(key, []).append(pos)
    ordered_groups = []
    for members in groups.values():
        members.sort(key=lambda p: (-len(batch[p].path), p))
        ordered_groups.append(tuple(members))
    order = tuple(p for g in ordered_groups for p in g)
    return Schedule(order, tuple(ordered_groups))
