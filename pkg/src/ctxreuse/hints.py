"""Order hints, location hints, and prompt assembly."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .core import DocId, PreconditionError, RewrittenRequest

Labeler = Callable[[DocId], str]

ORDER_PREFIX = "Please read the context in the following priority order: "
ORDER_SUFFIX = " and answer the question."
LOCATION_PREFIX = "Please refer to "
LOCATION_SUFFIX = " in the previous conversation"
SEPARATOR = "\n\n"

_LABEL = re.compile(r"^\[Doc_(\d+)\]$")


def default_label(doc: DocId) -> str:
    return f"[Doc_{doc}]"


def parse_label(label: str) -> DocId:
    m = _LABEL.match(label)
    if not m:
        raise ValueError(f"not a doc label: {label!r}")
    return int(m.group(1))


def render_order_hint(original_order: Sequence[DocId], labeler: Labeler = default_label) -> str:
    if not original_order:
        raise PreconditionError("order hint needs at least one document")
    if len(set(original_order)) != len(original_order):
        raise PreconditionError("order hint documents must be distinct")
    return ORDER_PREFIX + " > ".join(labeler(d) for d in original_order) + ORDER_SUFFIX


def parse_order_hint(text: str) -> list[str]:
    """Labels named by an order hint, highest priority first."""
    if not (text.startswith(ORDER_PREFIX) and text.endswith(ORDER_SUFFIX)):
        raise ValueError("not an order hint")
    return text[len(ORDER_PREFIX): -len(ORDER_SUFFIX)].split(" > ")


def render_location_hint(doc: DocId, labeler: Labeler = default_label) -> str:
    return LOCATION_PREFIX + labeler(doc) + LOCATION_SUFFIX


def parse_location_hint(text: str) -> str:
    if not (text.startswith(LOCATION_PREFIX) and text.endswith(LOCATION_SUFFIX)):
        raise ValueError("not a location hint")
    return text[len(LOCATION_PREFIX): -len(LOCATION_SUFFIX)]


def order_hint_for(req: RewrittenRequest, labeler: Labeler = default_label) -> Optional[str]:
    """Order hint for ``req``, or None when its order matches the retrieval order."""
    kept = set(req.ordered_docs)
    retrieval = tuple(d for d in req.original.docs if d in kept)
    if not retrieval or retrieval == tuple(req.ordered_docs):
        return None
    return render_order_hint(retrieval, labeler)


def with_hints(req: RewrittenRequest, labeler: Labeler = default_label, order_hints: bool = True) -> RewrittenRequest:
    req.order_hint = order_hint_for(req, labeler) if order_hints else None
    req.location_hints = tuple(render_location_hint(d, labeler) for d, _ in req.dedup_refs)
    return req


@dataclass(frozen=True)
class Segment:
    kind: str  # system | history | doc | order_hint | location_hint | question
    text: Optional[str] = None
    doc: Optional[DocId] = None


@dataclass
class PromptLayout:
    segments: list[Segment] = field(default_factory=list)
    labeler: Labeler = field(default=default_label, repr=False, compare=False)

    def to_text(self, doc_text: Optional[Callable[[DocId], str]] = None) -> str:
        parts = []
        for seg in self.segments:
            if seg.kind == "doc":
                label = self.labeler(seg.doc)
                parts.append(label if doc_text is None else f"{label}\n{doc_text(seg.doc)}")
            else:
                parts.append(seg.text or "")
        return SEPARATOR.join(parts)

    def to_json(self) -> dict[str, Any]:
        return {
            "segments": [
                {k: v for k, v in (("kind", s.kind), ("text", s.text), ("doc", s.doc)) if v is not None}
                for s in self.segments
            ]
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def assemble(
    req: RewrittenRequest,
    question: str,
    history: Sequence[str] = (),
    system_prompt: Optional[str] = None,
    order_hints: bool = True,
    labeler: Labeler = default_label,
) -> PromptLayout:
    """Lay out one turn's prompt.

    Location hints take the place their document held in the retrieval order;
    the order hint, if any, sits right before the question.
    """
    segs: list[Segment] = []
    if system_prompt is not None:
        segs.append(Segment("system", system_prompt))
    segs.extend(Segment("history", h) for h in history)

    rank = {d: i for i, d in enumerate(req.original.docs)}
    pending = sorted(req.dedup_refs, key=lambda ref: rank[ref[0]])
    for d in req.ordered_docs:
        while pending and rank[pending[0][0]] < rank[d]:
            ref = pending.pop(0)[0]
            segs.append(Segment("location_hint", render_location_hint(ref, labeler), ref))
        segs.append(Segment("doc", doc=d))
    for ref, _ in pending:
        segs.append(Segment("location_hint", render_location_hint(ref, labeler), ref))

    if order_hints:
        hint = req.order_hint if req.order_hint is not None else order_hint_for(req, labeler)
        if hint is not None:
            segs.append(Segment("order_hint", hint))
    segs.append(Segment("question", question))
    return PromptLayout(segs, labeler)
