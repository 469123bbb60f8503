"""Domain types shared across the package.

Everything here is a plain value type with a JSON-friendly ``to_dict`` /
``from_dict`` pair. Algorithms live in the other modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Union

DocId = int
SearchPath = tuple[int, ...]

DEFAULT_DOC_TOKENS = 1024


class PreconditionError(ValueError):
    """An operation was called with arguments outside its contract."""


class InvalidPathError(LookupError):
    """A search path does not resolve against the current index tree."""


class UnknownSessionError(KeyError):
    """A multi-turn request referenced a session that was never opened."""


@dataclass(frozen=True)
class Context:
    """Documents retrieved for one request, most relevant first."""

    docs: tuple[DocId, ...]
    token_counts: Mapping[DocId, int]
    session_id: str = ""
    turn: int = 0

    def __post_init__(self):
        docs = tuple(int(d) for d in self.docs)
        object.__setattr__(self, "docs", docs)
        if len(set(docs)) != len(docs):
            raise PreconditionError(f"duplicate DocId in context {list(docs)}")
        missing = [d for d in docs if d not in self.token_counts]
        if missing:
            raise PreconditionError(f"no token count for docs {missing}")
        for d in docs:
            if self.token_counts[d] <= 0:
                raise PreconditionError(f"token count for doc {d} must be positive")
        if self.turn < 0:
            raise PreconditionError("turn must be non-negative")

    @classmethod
    def of(
        cls,
        docs: Iterable[DocId],
        tokens: int | Mapping[DocId, int] = DEFAULT_DOC_TOKENS,
        session_id: str = "",
        turn: int = 0,
    ) -> "Context":
        docs = tuple(docs)
        if isinstance(tokens, Mapping):
            counts = {d: int(tokens[d]) for d in docs}
        else:
            counts = {d: int(tokens) for d in docs}
        return cls(docs, counts, session_id, turn)

    def tokens(self, docs: Optional[Iterable[DocId]] = None) -> int:
        docs = self.docs if docs is None else docs
        return sum(self.token_counts[d] for d in docs)

    def __len__(self) -> int:
        return len(self.docs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "docs": list(self.docs),
            "token_counts": {str(d): self.token_counts[d] for d in self.docs},
            "session_id": self.session_id,
            "turn": self.turn,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Context":
        counts = {int(k): int(v) for k, v in data["token_counts"].items()}
        return cls(tuple(data["docs"]), counts, data.get("session_id", ""), int(data.get("turn", 0)))


@dataclass(eq=False)
class IndexNode:
    """One node of the context index.

    ``context`` always starts with the parent's context. ``children`` may hold
    ``None`` tombstones left by eviction so sibling paths stay stable.
    """

    context: tuple[DocId, ...] = ()
    path: SearchPath = ()
    seq_len: int = 0
    multi_turn: bool = False
    children: list[Optional["IndexNode"]] = field(default_factory=list)
    last_access: int = 0
    is_virtual: bool = False
    uid: int = 0
    created: int = 0
    parent: Optional["IndexNode"] = field(default=None, repr=False)
    # set once the node has held tokens; pending nodes are never pruned
    filled: bool = False

    def live_children(self) -> list["IndexNode"]:
        return [c for c in self.children if c is not None]

    @property
    def is_leaf(self) -> bool:
        return not any(c is not None for c in self.children)

    def to_dict(self) -> dict[str, Any]:
        return {
            "context": list(self.context),
            "path": list(self.path),
            "seq_len": self.seq_len,
            "multi_turn": self.multi_turn,
            "children": [None if c is None else c.to_dict() for c in self.children],
            "last_access": self.last_access,
            "is_virtual": self.is_virtual,
            "uid": self.uid,
            "created": self.created,
            "filled": self.filled,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], parent: Optional["IndexNode"] = None) -> "IndexNode":
        node = cls(
            context=tuple(data["context"]),
            path=tuple(data["path"]),
            seq_len=int(data["seq_len"]),
            multi_turn=bool(data["multi_turn"]),
            last_access=int(data["last_access"]),
            is_virtual=bool(data["is_virtual"]),
            uid=int(data["uid"]),
            created=int(data["created"]),
            parent=parent,
            filled=bool(data.get("filled", True)),
        )
        node.children = [
            None if c is None else cls.from_dict(c, parent=node) for c in data["children"]
        ]
        return node


@dataclass
class RewrittenRequest:
    original: Context
    ordered_docs: tuple[DocId, ...]
    dedup_refs: tuple[tuple[DocId, int], ...] = ()
    order_hint: Optional[str] = None
    location_hints: tuple[str, ...] = ()
    path: SearchPath = ()
    # the session's cached node was evicted; dedup still applied
    cache_miss: bool = False

    def check_conservation(self) -> None:
        removed = [d for d, _ in self.dedup_refs]
        if sorted(self.ordered_docs + tuple(removed)) != sorted(self.original.docs):
            raise AssertionError(
                f"rewrite lost or invented docs: {self.original.docs} -> "
                f"{self.ordered_docs} + {removed}"
            )
        if len(set(self.ordered_docs)) != len(self.ordered_docs):
            raise AssertionError(f"duplicate docs in {self.ordered_docs}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "original": self.original.to_dict(),
            "ordered_docs": list(self.ordered_docs),
            "dedup_refs": [[d, t] for d, t in self.dedup_refs],
            "order_hint": self.order_hint,
            "location_hints": list(self.location_hints),
            "path": list(self.path),
            "cache_miss": self.cache_miss,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewrittenRequest":
        return cls(
            original=Context.from_dict(data["original"]),
            ordered_docs=tuple(data["ordered_docs"]),
            dedup_refs=tuple((int(d), int(t)) for d, t in data["dedup_refs"]),
            order_hint=data.get("order_hint"),
            location_hints=tuple(data.get("location_hints", ())),
            path=tuple(data.get("path", ())),
            cache_miss=bool(data.get("cache_miss", False)),
        )


@dataclass(frozen=True)
class Evicted:
    n_tokens: int
    type: str = field(default="evicted", init=False)


@dataclass(frozen=True)
class Appended:
    path: SearchPath
    n_tokens: int
    type: str = field(default="appended", init=False)


@dataclass(frozen=True)
class Accessed:
    path: SearchPath
    type: str = field(default="accessed", init=False)


CacheEvent = Union[Evicted, Appended, Accessed]


def event_to_dict(event: CacheEvent) -> dict[str, Any]:
    out: dict[str, Any] = {"type": event.type}
    if not isinstance(event, Evicted):
        out["path"] = list(event.path)
    if not isinstance(event, Accessed):
        out["n_tokens"] = event.n_tokens
    return out


def event_from_dict(data: Mapping[str, Any]) -> CacheEvent:
    kind = data.get("type")
    try:
        if kind == "evicted":
            return Evicted(int(data["n_tokens"]))
        if kind == "appended":
            return Appended(tuple(int(s) for s in data["path"]), int(data["n_tokens"]))
        if kind == "accessed":
            return Accessed(tuple(int(s) for s in data["path"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise PreconditionError(f"malformed {kind} event: {exc}") from exc
    raise PreconditionError(f"unknown cache event type {kind!r}")
