"""Confidence-scored knowledge graph store.

Entities and edges carry a provenance (``truth`` or ``generated``) and an
integer confidence in ``[0, 100]``. Truth elements are pinned at 100 and can
never be rescored or removed through the refinement path; generated elements
are scored by a judge model and may be pruned.

Edges are stored directed (head -> tail) but the adjacency index lists each
edge under both endpoints, so traversal sees every incident edge.

The store follows a single-writer / multi-reader contract: mutations must be
serialized by the caller, reads between mutations are safe from any thread.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import unicodedata
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple

from .errors import (
    DuplicateId,
    InvariantViolation,
    IoFailure,
    MalformedRecord,
    MissingEndpoint,
    TruthImmutable,
    UnknownEdge,
    UnknownElement,
    UnknownEntity,
)

TRUTH_CONFIDENCE = 100


class Kind(str, Enum):
    TRUTH = "truth"
    GENERATED = "generated"


@dataclass(frozen=True)
class Provenance:
    kind: Kind
    session_of_origin: str | None = None
    last_evaluated_session: str | None = None

    @classmethod
    def truth(cls) -> Provenance:
        return cls(Kind.TRUTH)

    @classmethod
    def generated(cls, session_id: str) -> Provenance:
        return cls(Kind.GENERATED, session_id, session_id)


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    description: str
    provenance: Provenance
    confidence: int

    @property
    def is_truth(self) -> bool:
        return self.provenance.kind is Kind.TRUTH


@dataclass(frozen=True)
class Edge:
    id: str
    head: str
    tail: str
    predicate: str
    description: str
    provenance: Provenance
    confidence: int

    @property
    def is_truth(self) -> bool:
        return self.provenance.kind is Kind.TRUTH

    def other(self, entity_id: str) -> str:
        """Return the endpoint opposite ``entity_id``."""
        if entity_id == self.head:
            return self.tail
        if entity_id == self.tail:
            return self.head
        raise UnknownEntity(f"{entity_id!r} is not an endpoint of edge {self.id!r}")


class GraphStats(NamedTuple):
    entities: int
    edges: int
    generated_entities: int
    generated_edges: int


def slugify(text: str) -> str:
    """Lowercase ASCII slug used for ids and for name matching."""
    norm = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii")
    slug = re.sub(r"[^a-z0-9]+", "-", norm.lower()).strip("-")
    return slug or "x"


def _check_confidence(value: object) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvariantViolation(f"confidence must be an integer, got {value!r}")
    if not 0 <= value <= 100:
        raise InvariantViolation(f"confidence {value} outside [0, 100]")
    return value


def _check_provenance(prov: Provenance, confidence: int, what: str) -> None:
    if prov.kind is Kind.TRUTH:
        if confidence != TRUTH_CONFIDENCE:
            raise InvariantViolation(f"truth {what} must have confidence 100, got {confidence}")
        if prov.session_of_origin is not None or prov.last_evaluated_session is not None:
            raise InvariantViolation(f"truth {what} cannot carry session provenance")
    elif prov.session_of_origin is None:
        raise InvariantViolation(f"generated {what} needs a session of origin")


class KnowledgeGraph:
    """In-memory graph with provenance, confidence and a two-way adjacency index."""

    def __init__(self) -> None:
        self._entities: dict[str, Entity] = {}
        self._edges: dict[str, Edge] = {}
        self._adjacency: dict[str, set[str]] = {}
        self._by_name: dict[str, set[str]] = {}
        self._by_triple: dict[tuple[str, str, str], str] = {}
        # ids removed during this process lifetime; never handed out again
        self._retired: set[str] = set()

    # -- read access --------------------------------------------------------

    @property
    def entities(self) -> dict[str, Entity]:
        return dict(self._entities)

    @property
    def edges(self) -> dict[str, Edge]:
        return dict(self._edges)

    def adjacency(self, entity_id: str) -> frozenset[str]:
        if entity_id not in self._entities:
            raise UnknownEntity(entity_id)
        return frozenset(self._adjacency[entity_id])

    def has_entity(self, entity_id: str) -> bool:
        return entity_id in self._entities

    def has_edge(self, edge_id: str) -> bool:
        return edge_id in self._edges

    def __contains__(self, element_id: object) -> bool:
        return element_id in self._entities or element_id in self._edges

    def entity(self, entity_id: str) -> Entity:
        try:
            return self._entities[entity_id]
        except KeyError:
            raise UnknownEntity(entity_id) from None

    def edge(self, edge_id: str) -> Edge:
        try:
            return self._edges[edge_id]
        except KeyError:
            raise UnknownEdge(edge_id) from None

    def get(self, element_id: str) -> Entity | Edge:
        if element_id in self._entities:
            return self._entities[element_id]
        if element_id in self._edges:
            return self._edges[element_id]
        raise UnknownElement(element_id)

    def id_in_use(self, element_id: str) -> bool:
        """True if the id is live or was retired earlier in this process."""
        return element_id in self or element_id in self._retired

    def degree(self, entity_id: str) -> int:
        return len(self.adjacency(entity_id))

    def neighbors(self, entity_id: str) -> list[tuple[Edge, Entity]]:
        """Incident edges paired with the opposite endpoint, ascending edge id."""
        if entity_id not in self._entities:
            raise UnknownEntity(entity_id)
        out = []
        for edge_id in sorted(self._adjacency[entity_id]):
            edge = self._edges[edge_id]
            out.append((edge, self._entities[edge.other(entity_id)]))
        return out

    def find_entity_by_name(self, name: str) -> Entity | None:
        """Entity whose name slugs to the same key; lowest id wins on ties."""
        ids = self._by_name.get(slugify(name))
        if not ids:
            return None
        return self._entities[min(ids)]

    def find_edge(self, head: str, predicate: str, tail: str) -> Edge | None:
        edge_id = self._by_triple.get((head, slugify(predicate), tail))
        return self._edges[edge_id] if edge_id is not None else None

    def iter_entities(self) -> Iterator[Entity]:
        for key in sorted(self._entities):
            yield self._entities[key]

    def iter_edges(self) -> Iterator[Edge]:
        for key in sorted(self._edges):
            yield self._edges[key]

    def stats(self) -> GraphStats:
        gen_entities = sum(1 for e in self._entities.values() if not e.is_truth)
        gen_edges = sum(1 for e in self._edges.values() if not e.is_truth)
        return GraphStats(len(self._entities), len(self._edges), gen_entities, gen_edges)

    # -- mutation -----------------------------------------------------------

    def add_entity(self, entity: Entity) -> str:
        if not isinstance(entity.id, str) or not entity.id.strip():
            raise InvariantViolation("entity id must be a non-blank string")
        if not entity.name.strip():
            raise InvariantViolation(f"entity {entity.id!r} has a blank name")
        if self.id_in_use(entity.id):
            raise DuplicateId(entity.id)
        _check_confidence(entity.confidence)
        _check_provenance(entity.provenance, entity.confidence, "entity")
        self._entities[entity.id] = entity
        self._adjacency[entity.id] = set()
        self._by_name.setdefault(slugify(entity.name), set()).add(entity.id)
        return entity.id

    def add_edge(self, edge: Edge) -> str:
        if not isinstance(edge.id, str) or not edge.id.strip():
            raise InvariantViolation("edge id must be a non-blank string")
        if not edge.predicate.strip():
            raise InvariantViolation(f"edge {edge.id!r} has a blank predicate")
        if self.id_in_use(edge.id):
            raise DuplicateId(edge.id)
        for endpoint in (edge.head, edge.tail):
            if endpoint not in self._entities:
                raise MissingEndpoint(f"edge {edge.id!r}: no entity {endpoint!r}")
        _check_confidence(edge.confidence)
        _check_provenance(edge.provenance, edge.confidence, "edge")
        self._edges[edge.id] = edge
        self._adjacency[edge.head].add(edge.id)
        self._adjacency[edge.tail].add(edge.id)
        self._by_triple.setdefault((edge.head, slugify(edge.predicate), edge.tail), edge.id)
        return edge.id

    def remove_edge(self, edge_id: str) -> None:
        edge = self._edges.pop(edge_id, None)
        if edge is None:
            raise UnknownEdge(edge_id)
        self._adjacency[edge.head].discard(edge_id)
        self._adjacency[edge.tail].discard(edge_id)
        key = (edge.head, slugify(edge.predicate), edge.tail)
        if self._by_triple.get(key) == edge_id:
            del self._by_triple[key]
        self._retired.add(edge_id)

    def remove_entity(self, entity_id: str) -> int:
        """Remove an entity and every incident edge; returns the edge count removed."""
        if entity_id not in self._entities:
            raise UnknownEntity(entity_id)
        incident = sorted(self._adjacency[entity_id])
        for edge_id in incident:
            self.remove_edge(edge_id)
        entity = self._entities.pop(entity_id)
        del self._adjacency[entity_id]
        names = self._by_name[slugify(entity.name)]
        names.discard(entity_id)
        if not names:
            del self._by_name[slugify(entity.name)]
        self._retired.add(entity_id)
        return len(incident)

    def _generated(self, element_id: str) -> Entity | Edge:
        element = self.get(element_id)
        if element.is_truth:
            raise TruthImmutable(element_id)
        return element

    def _store(self, element: Entity | Edge) -> None:
        if isinstance(element, Entity):
            self._entities[element.id] = element
        else:
            self._edges[element.id] = element

    def set_confidence(self, element_id: str, value: int, session_id: str | None = None) -> None:
        element = self._generated(element_id)
        _check_confidence(value)
        prov = element.provenance
        if session_id is not None:
            prov = replace(prov, last_evaluated_session=session_id)
        self._store(replace(element, confidence=value, provenance=prov))

    def set_description(self, element_id: str, description: str) -> None:
        element = self._generated(element_id)
        self._store(replace(element, description=description))

    # -- integrity / comparison --------------------------------------------

    def integrity_problems(self) -> list[str]:
        """Rebuild adjacency from the edge map and report every discrepancy."""
        problems = []
        rebuilt: dict[str, set[str]] = {eid: set() for eid in self._entities}
        for edge in self._edges.values():
            for endpoint in (edge.head, edge.tail):
                if endpoint not in rebuilt:
                    problems.append(f"edge {edge.id} dangles at {endpoint}")
                else:
                    rebuilt[endpoint].add(edge.id)
        if set(self._adjacency) != set(rebuilt):
            problems.append("adjacency keys differ from entity ids")
        for eid, expected in rebuilt.items():
            if self._adjacency.get(eid) != expected:
                problems.append(f"adjacency of {eid} is inconsistent")
        return problems

    def records(self) -> list[dict]:
        """Serializable records in file order: entities then edges, ascending id."""
        return [entity_record(e) for e in self.iter_entities()] + [
            edge_record(e) for e in self.iter_edges()
        ]

    def copy(self) -> KnowledgeGraph:
        clone = KnowledgeGraph()
        for entity in self.iter_entities():
            clone.add_entity(entity)
        for edge in self.iter_edges():
            clone.add_edge(edge)
        clone._retired = set(self._retired)
        return clone

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self._entities == other._entities and self._edges == other._edges

    def __repr__(self) -> str:
        s = self.stats()
        return f"KnowledgeGraph(entities={s.entities}, edges={s.edges})"

    # -- persistence --------------------------------------------------------

    def dumps(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.records())

    def save(self, path: str | os.PathLike) -> None:
        """Write the graph atomically (temp file in the same directory, then rename)."""
        atomic_write_text(Path(path), self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike) -> KnowledgeGraph:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read graph {path}: {exc}") from exc
        return cls.loads(text, source=str(path))

    @classmethod
    def loads(cls, text: str, source: str | None = None) -> KnowledgeGraph:
        graph = cls()
        seen_edge = False
        for lineno, line in enumerate(jsonl_lines(text), start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})", source) from None
            if not isinstance(obj, dict):
                raise MalformedRecord(lineno, "record is not an object", source)
            kind = obj.get("type")
            try:
                if kind == "entity":
                    if seen_edge:
                        raise MalformedRecord(lineno, "entity record after edge records", source)
                    graph.add_entity(_entity_from_record(obj))
                elif kind == "edge":
                    seen_edge = True
                    graph.add_edge(_edge_from_record(obj))
                else:
                    raise MalformedRecord(lineno, f"unknown record type {kind!r}", source)
            except MalformedRecord:
                raise
            except (ValueError, TypeError, DuplicateId, InvariantViolation, MissingEndpoint) as exc:
                raise MalformedRecord(lineno, str(exc), source) from None
        return graph


def jsonl_lines(text: str) -> list[str]:
    """Split on newlines only; str.splitlines would also break on U+0085 and friends."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.rstrip("\r") for line in lines]


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- record (de)serialization ----------------------------------------------

ENTITY_FIELDS = (
    "type", "id", "name", "description", "kind", "confidence", "origin_session", "last_eval_session",
)
EDGE_FIELDS = (
    "type", "id", "predicate", "head", "tail", "description", "kind", "confidence",
    "origin_session", "last_eval_session",
)


def entity_record(e: Entity) -> dict:
    return {
        "type": "entity",
        "id": e.id,
        "name": e.name,
        "description": e.description,
        "kind": e.provenance.kind.value,
        "confidence": e.confidence,
        "origin_session": e.provenance.session_of_origin,
        "last_eval_session": e.provenance.last_evaluated_session,
    }


def edge_record(e: Edge) -> dict:
    return {
        "type": "edge",
        "id": e.id,
        "predicate": e.predicate,
        "head": e.head,
        "tail": e.tail,
        "description": e.description,
        "kind": e.provenance.kind.value,
        "confidence": e.confidence,
        "origin_session": e.provenance.session_of_origin,
        "last_eval_session": e.provenance.last_evaluated_session,
    }


def _check_fields(obj: dict, expected: tuple[str, ...]) -> None:
    keys = set(obj)
    unknown = keys - set(expected)
    missing = set(expected) - keys
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    for key in expected:
        value = obj[key]
        if key in ("origin_session", "last_eval_session"):
            if value is not None and not isinstance(value, str):
                raise ValueError(f"{key} must be a string or null")
        elif key != "confidence" and not isinstance(value, str):
            raise ValueError(f"{key} must be a string")


def _provenance(obj: dict) -> Provenance:
    return Provenance(Kind(obj["kind"]), obj["origin_session"], obj["last_eval_session"])


def _entity_from_record(obj: dict) -> Entity:
    _check_fields(obj, ENTITY_FIELDS)
    return Entity(obj["id"], obj["name"], obj["description"], _provenance(obj), obj["confidence"])


def _edge_from_record(obj: dict) -> Edge:
    _check_fields(obj, EDGE_FIELDS)
    return Edge(
        obj["id"], obj["head"], obj["tail"], obj["predicate"], obj["description"],
        _provenance(obj), obj["confidence"],
    )
