"""Per-query reasoning state and its event trace."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .kg_store import Edge, Entity, atomic_write_text
from .refine import RefineOutcome

TRACE_EVENTS = frozenset({
    "seed", "decide", "search", "generate", "judge", "insert", "prune", "cache_skip", "answer",
})


@dataclass(frozen=True)
class TraceEvent:
    session_id: str
    step: int
    event: str
    payload: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"session_id": self.session_id, "step": self.step, "event": self.event,
             "payload": self.payload},
            ensure_ascii=False,
        )


@dataclass
class EvidenceItem:
    """A fact snapshot taken when it was appended; ``pruned_after_use`` flags later removal."""

    edge: Edge
    entity: Entity
    pruned_after_use: bool = False

    def describe(self, names: dict[str, str]) -> str:
        e = self.edge
        head = names.get(e.head, e.head)
        tail = names.get(e.tail, e.tail)
        text = f"{head} --{e.predicate}--> {tail} ({e.provenance.kind.value}, {e.confidence})"
        if e.description:
            text += f": {e.description}"
        return text

    def triple(self, names: dict[str, str]) -> dict[str, Any]:
        e = self.edge
        return {
            "edge_id": e.id,
            "head": names.get(e.head, e.head),
            "predicate": e.predicate,
            "tail": names.get(e.tail, e.tail),
            "kind": e.provenance.kind.value,
            "confidence": e.confidence,
            "pruned_after_use": self.pruned_after_use,
        }


@dataclass
class SessionState:
    session_id: str
    query: str
    frontier: set[str] = field(default_factory=set)
    visited_entities: set[str] = field(default_factory=set)
    traversed_edges: set[str] = field(default_factory=set)
    evidence: list[EvidenceItem] = field(default_factory=list)
    rescore_cache: set[str] = field(default_factory=set)
    trace: list[TraceEvent] = field(default_factory=list)
    hop_count: int = 0
    generate_count: int = 0
    step: int = 0
    outcome: RefineOutcome = field(default_factory=RefineOutcome)
    # entity id -> name, kept so evidence stays printable after pruning
    names: dict[str, str] = field(default_factory=dict)

    def record(self, event: str, **payload: Any) -> TraceEvent:
        if event not in TRACE_EVENTS:
            raise ValueError(f"unknown trace event {event!r}")
        ev = TraceEvent(self.session_id, self.step, event, payload)
        self.trace.append(ev)
        return ev

    def events(self, kind: str | None = None) -> list[TraceEvent]:
        return [e for e in self.trace if kind is None or e.event == kind]

    def trace_text(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.trace)

    def write_trace(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        atomic_write_text(path, self.trace_text())
        return path
