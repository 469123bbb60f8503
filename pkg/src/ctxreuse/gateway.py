"""Newline-delimited JSON rewrite service.

Each line a client sends is one JSON value: a rewrite request, one cache event
or an array of cache events. Each gets exactly one reply line. Malformed input
gets an ``{"error": ...}`` reply and the connection stays open.
"""

from __future__ import annotations

import json
import logging
import os
import socketserver
import tempfile
import threading
from pathlib import Path
from typing import Any, Optional

from .core import (
    DEFAULT_DOC_TOKENS,
    Context,
    InvalidPathError,
    PreconditionError,
    UnknownSessionError,
    event_from_dict,
)
from .dedup import SessionStore
from .hints import assemble
from .index import ContextIndex
from .pipeline import Rewriter
from .workload import Interner

log = logging.getLogger(__name__)

STATE_FILE = "state.json"


class RequestError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_state(path: Path, index: ContextIndex, sessions: SessionStore, interner: Interner) -> None:
    doc = {"index": index.to_json(), "sessions": sessions.to_json(), "interner": interner.to_json()}
    atomic_write(path, json.dumps(doc, sort_keys=True))


def load_state(path: Path) -> tuple[ContextIndex, SessionStore, Interner]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return (
        ContextIndex.from_json(doc["index"]),
        SessionStore.from_json(doc.get("sessions", {})),
        Interner.from_json(doc.get("interner", {})),
    )


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class Gateway:
    """Dispatches messages against the persisted stores.

    All mutation happens under one lock, so concurrent connections see a
    single serial history.
    """

    def __init__(
        self,
        data_dir: Optional[str | Path] = None,
        ordering: bool = True,
        dedup: bool = True,
        hints: bool = True,
        system_prompt: Optional[str] = None,
    ):
        self.state_path = Path(data_dir) / STATE_FILE if data_dir is not None else None
        if self.state_path is not None and self.state_path.exists():
            index, sessions, interner = load_state(self.state_path)
        else:
            index, sessions, interner = ContextIndex(register_tokens=False), SessionStore(), Interner()
        self.interner = interner
        self.system_prompt = system_prompt
        self.rewriter = Rewriter(index, sessions, ordering, dedup, hints, labeler=self.label)
        self.lock = threading.Lock()

    @property
    def index(self) -> ContextIndex:
        return self.rewriter.index

    @property
    def sessions(self) -> SessionStore:
        return self.rewriter.sessions

    def label(self, doc: int) -> str:
        return f"[Doc_{self.interner.name(doc)}]"

    def persist(self) -> None:
        if self.state_path is not None:
            save_state(self.state_path, self.index, self.sessions, self.interner)

    def handle_line(self, line: str) -> str:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return dumps({"error": {"code": "bad_json", "message": f"{exc.msg} at column {exc.colno}"}})
        with self.lock:
            try:
                reply = self.handle(msg)
            except RequestError as exc:
                reply = {"error": {"code": exc.code, "message": str(exc)}}
        return dumps(reply)

    def handle(self, msg: Any) -> dict[str, Any]:
        if isinstance(msg, list) or (isinstance(msg, dict) and "type" in msg):
            return self._events(msg if isinstance(msg, list) else [msg])
        if isinstance(msg, dict):
            return self._rewrite(msg)
        raise RequestError("bad_request", "expected a JSON object or an array of events")

    def _events(self, items: list) -> dict[str, Any]:
        try:
            events = [event_from_dict(e) if isinstance(e, dict) else event_from_dict({}) for e in items]
        except PreconditionError as exc:
            raise RequestError("bad_event", str(exc)) from None
        # validate the whole batch before applying any of it
        for ev in events:
            if getattr(ev, "path", None) is not None:
                try:
                    self.index.traverse(ev.path)
                except InvalidPathError as exc:
                    raise RequestError("invalid_path", str(exc)) from None
        applied = 0
        try:
            for ev in events:
                self.index.apply_cache_event(ev)
                applied += 1
        except (InvalidPathError, PreconditionError) as exc:
            self.persist()
            raise RequestError("invalid_path" if isinstance(exc, InvalidPathError) else "bad_event",
                               f"{exc} (applied {applied} of {len(events)})") from None
        self.persist()
        return {"ok": True, "applied": applied}

    def _context(self, msg: dict) -> tuple[Context, str]:
        sid, turn, retrieved = msg.get("session_id"), msg.get("turn"), msg.get("retrieved")
        if not isinstance(sid, str) or not sid:
            raise RequestError("bad_request", "session_id must be a non-empty string")
        if isinstance(turn, bool) or not isinstance(turn, int) or turn < 0:
            raise RequestError("bad_request", "turn must be a non-negative integer")
        if not isinstance(retrieved, list) or not retrieved:
            raise RequestError("bad_request", "retrieved must be a non-empty array")
        raw_tokens = msg.get("doc_tokens", {})
        question = msg.get("question", "")
        if not isinstance(raw_tokens, dict) or not isinstance(question, str):
            raise RequestError("bad_request", "doc_tokens must be an object and question a string")
        # resolve ids on a scratch interner so a rejected request leaves no trace
        scratch = Interner.from_json(self.interner.to_json())
        try:
            docs = [scratch.intern(d) for d in retrieved]
            tokens = {scratch.intern(k): v for k, v in raw_tokens.items()}
            counts = {d: tokens.get(d, DEFAULT_DOC_TOKENS) for d in docs}
            if any(isinstance(n, bool) or not isinstance(n, int) for n in counts.values()):
                raise ValueError("token counts must be integers")
            ctx = Context(tuple(docs), counts, sid, turn)
        except (TypeError, ValueError) as exc:
            raise RequestError("bad_request", str(exc)) from None
        self.interner = scratch
        return ctx, question

    def _rewrite(self, msg: dict) -> dict[str, Any]:
        before = self.interner
        ctx, question = self._context(msg)
        try:
            req = self.rewriter.rewrite(ctx)
        except UnknownSessionError:
            self.interner = before
            raise RequestError("unknown_session", f"no session {ctx.session_id!r}; send turn 0 first") from None
        except InvalidPathError as exc:
            self.interner = before
            raise RequestError("invalid_path", str(exc)) from None
        except PreconditionError as exc:
            self.interner = before
            raise RequestError("precondition", str(exc)) from None
        layout = assemble(req, question, system_prompt=self.system_prompt,
                          order_hints=self.rewriter.hints, labeler=self.label)
        self.persist()
        name = self.interner.name
        return {
            "ordered_docs": [name(d) for d in req.ordered_docs],
            "dedup_refs": [[name(d), t] for d, t in req.dedup_refs],
            "order_hint": req.order_hint,
            "location_hints": list(req.location_hints),
            "prompt_text": layout.to_text(),
        }


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        gateway: Gateway = self.server.gateway
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            reply = gateway.handle_line(line)
            self.wfile.write(reply.encode("utf-8") + b"\n")
            self.wfile.flush()


class GatewayServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], gateway: Gateway):
        self.gateway = gateway
        super().__init__(address, _Handler)


def serve(gateway: Gateway, host: str = "127.0.0.1", port: int = 7878) -> None:
    with GatewayServer((host, port), gateway) as server:
        log.info("listening on %s:%d", *server.server_address[:2])
        server.serve_forever()
