"""Multi-turn de-duplication against a session's own history."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .core import (
    Context,
    DocId,
    IndexNode,
    InvalidPathError,
    PreconditionError,
    RewrittenRequest,
    SearchPath,
    UnknownSessionError,
)
from .index import ContextIndex


@dataclass
class SessionState:
    session_id: str
    path: SearchPath = ()
    node_uid: Optional[int] = None
    seen_docs: dict[DocId, int] = field(default_factory=dict)
    cumulative_tokens: int = 0
    # number of the next turn to process
    turn: int = 0
    multi_turn: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "path": list(self.path),
            "node_uid": self.node_uid,
            "seen_docs": {str(d): t for d, t in self.seen_docs.items()},
            "cumulative_tokens": self.cumulative_tokens,
            "turn": self.turn,
            "multi_turn": self.multi_turn,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SessionState":
        return cls(
            session_id=data["session_id"],
            path=tuple(data["path"]),
            node_uid=data.get("node_uid"),
            seen_docs={int(d): int(t) for d, t in data["seen_docs"].items()},
            cumulative_tokens=int(data["cumulative_tokens"]),
            turn=int(data["turn"]),
            multi_turn=bool(data.get("multi_turn", False)),
        )


def open_session(index: ContextIndex, ctx: Context, path: SearchPath) -> SessionState:
    """State after turn 0 of ``ctx`` was registered in ``index`` at ``path``."""
    node = index.traverse(path)
    return SessionState(
        session_id=ctx.session_id,
        path=tuple(path),
        node_uid=node.uid,
        seen_docs={d: ctx.turn for d in ctx.docs},
        cumulative_tokens=ctx.tokens(),
        turn=ctx.turn + 1,
    )


def resolve(state: SessionState, index: ContextIndex) -> tuple[Optional[IndexNode], SearchPath]:
    """Find the session's node; ``(None, path)`` if it has been evicted.

    Nodes move when an insertion splits them, so a path that now points
    elsewhere is re-resolved through the node's uid.
    """
    try:
        node = index.traverse(state.path)
        if state.node_uid is None or node.uid == state.node_uid:
            return node, state.path
    except InvalidPathError:
        if state.node_uid is None:
            raise
    moved = index.node(state.node_uid)
    if moved is not None:
        return moved, moved.path
    if state.node_uid in index.pruned:
        return None, state.path
    raise InvalidPathError(f"session {state.session_id!r} path {list(state.path)} does not resolve")


def activate_multi_turn(state: SessionState, index: ContextIndex) -> None:
    if state.turn < 1 or state.node_uid is None:
        raise PreconditionError(f"session {state.session_id!r} has no completed first turn")
    node, path = resolve(state, index)
    if node is not None:
        node.multi_turn = True
    state.path = path
    state.multi_turn = True


def dedup_turn(
    state: SessionState, index: ContextIndex, retrieved: Context
) -> tuple[RewrittenRequest, SessionState]:
    """Drop documents the session already prefilled in an earlier turn.

    Novel documents keep their retrieval order. Returns the rewritten request
    and a new state; ``state`` itself is left untouched.
    """
    if state.turn < 1:
        raise PreconditionError("dedup applies from the second turn of a session on")
    if retrieved.session_id and retrieved.session_id != state.session_id:
        raise UnknownSessionError(retrieved.session_id)
    node, path = resolve(state, index)
    novel, refs = [], []
    for d in retrieved.docs:
        first = state.seen_docs.get(d)
        if first is None:
            novel.append(d)
        else:
            refs.append((d, first))
    seen = dict(state.seen_docs)
    for d in novel:
        seen[d] = state.turn
    req = RewrittenRequest(
        original=retrieved,
        ordered_docs=tuple(novel),
        dedup_refs=tuple(refs),
        path=path,
        cache_miss=node is None,
    )
    new_state = dataclasses.replace(
        state,
        path=path,
        seen_docs=seen,
        cumulative_tokens=state.cumulative_tokens + retrieved.tokens(novel),
        turn=state.turn + 1,
    )
    return req, new_state


def passthrough_turn(state: SessionState, retrieved: Context) -> tuple[RewrittenRequest, SessionState]:
    """Advance a session without de-duplication (every doc is prefilled again)."""
    seen = dict(state.seen_docs)
    for d in retrieved.docs:
        seen.setdefault(d, state.turn)
    req = RewrittenRequest(original=retrieved, ordered_docs=retrieved.docs, path=state.path)
    new_state = dataclasses.replace(
        state,
        seen_docs=seen,
        cumulative_tokens=state.cumulative_tokens + retrieved.tokens(),
        turn=state.turn + 1,
    )
    return req, new_state


class SessionStore(dict):
    """``session_id -> SessionState`` with JSON export for persistence."""

    def get_state(self, session_id: str) -> SessionState:
        try:
            return self[session_id]
        except KeyError:
            raise UnknownSessionError(session_id) from None

    def to_json(self) -> dict[str, Any]:
        return {sid: st.to_dict() for sid, st in sorted(self.items())}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "SessionStore":
        return cls({sid: SessionState.from_dict(st) for sid, st in data.items()})
