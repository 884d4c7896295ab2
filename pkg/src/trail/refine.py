"""Confidence-gated insertion, re-evaluation and pruning of generated facts.

Dead-end path: sample candidate facts from the reasoner at low temperature,
merge them through the aggregator, parse the consensus, score every candidate
with the judge and insert only those scoring strictly above ``tau``.

Expansion path: when reasoning walks onto a generated element, the judge
re-scores it once per session; the stored score becomes a convex combination
of old and new, and anything that drops strictly below ``tau`` is pruned.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any

from . import prompts
from .embed_index import EmbeddingIndex
from .errors import DuplicateId, MalformedConsensus, TruthImmutable, UnparsableJudgeReply
from .kg_store import Edge, Entity, KnowledgeGraph, Provenance, slugify
from .llm_gateway import ModelGateway

if TYPE_CHECKING:
    from .session import SessionState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    tau: int = 60
    combine_alpha: float = 0.5
    sample_count: int = 3
    generation_temperature: float = 0.2
    embed_new_entities: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.tau, bool) or not isinstance(self.tau, int) or not 0 <= self.tau <= 100:
            raise ValueError(f"tau must be an integer in [0, 100], got {self.tau!r}")
        if not 0.0 <= self.combine_alpha <= 1.0:
            raise ValueError(f"combine_alpha must lie in [0, 1], got {self.combine_alpha!r}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.generation_temperature < 0:
            raise ValueError("generation_temperature must be >= 0")


@dataclass(frozen=True)
class CandidateTriple:
    head_name: str
    predicate: str
    tail_name: str
    head_description: str = ""
    tail_description: str = ""
    edge_description: str = ""
    source_step: int | None = None

    def __post_init__(self) -> None:
        for name in ("head_name", "predicate", "tail_name"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-blank")

    def label(self) -> str:
        return f"{self.head_name} --{self.predicate}--> {self.tail_name}"


@dataclass
class RefineOutcome:
    inserted: list[tuple[str, int]] = field(default_factory=list)
    rejected: list[tuple[CandidateTriple, int | None, str]] = field(default_factory=list)
    pruned: list[str] = field(default_factory=list)
    rescored: list[tuple[str, int, int]] = field(default_factory=list)
    # incident edges removed together with a pruned entity
    detached_edges: list[str] = field(default_factory=list)
    failed_generations: int = 0

    def extend(self, other: RefineOutcome) -> None:
        self.inserted.extend(other.inserted)
        self.rejected.extend(other.rejected)
        self.pruned.extend(other.pruned)
        self.rescored.extend(other.rescored)
        self.detached_edges.extend(other.detached_edges)
        self.failed_generations += other.failed_generations

    def to_dict(self) -> dict[str, Any]:
        return {
            "inserted": [{"id": i, "score": s} for i, s in self.inserted],
            "rejected": [
                {"candidate": _candidate_dict(c), "score": s, "reason": r}
                for c, s, r in self.rejected
            ],
            "pruned": list(self.pruned),
            "rescored": [{"id": i, "old": o, "new": n} for i, o, n in self.rescored],
            "detached_edges": list(self.detached_edges),
            "failed_generations": self.failed_generations,
        }

    def summary(self) -> str:
        return (
            f"inserted: {len(self.inserted)} elements, rejected: {len(self.rejected)}, "
            f"pruned: {len(self.pruned)}, rescored: {len(self.rescored)}"
        )


def _candidate_dict(c: CandidateTriple) -> dict[str, Any]:
    d = asdict(c)
    d.pop("source_step")
    return d


@dataclass(frozen=True)
class ReevalDecision:
    KEPT = "kept"
    PRUNED = "pruned"
    CACHE_SKIP = "cache_skip"
    JUDGE_FAILED = "judge_failed"

    kind: str
    score: int | None = None
    removed_edges: int = 0

    @property
    def survives(self) -> bool:
        return self.kind != self.PRUNED


def combine_confidence(old: int, judged: int, alpha: float) -> int:
    """round(alpha * judged + (1 - alpha) * old), rounding halves up."""
    for name, value in (("old", old), ("judged", judged)):
        if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 100:
            raise ValueError(f"{name} must be an integer in [0, 100], got {value!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    # exact decimal arithmetic so 0.5-boundaries round the same on every platform
    a = Fraction(str(alpha))
    return math.floor(a * judged + (1 - a) * old + Fraction(1, 2))


_ARRAY = re.compile(r"\[.*\]", re.DOTALL)


def parse_consensus(text: str, warnings: list[str] | None = None) -> list[CandidateTriple]:
    """Parse an aggregator reply into candidate triples.

    The reply must contain a JSON array of objects with ``head``,
    ``relation`` and ``tail``; descriptions are optional. Objects with blank
    or missing required fields are dropped individually, as are repeats of a
    triple already listed (compared by slug).
    """
    m = _ARRAY.search(text)
    if m is None:
        raise MalformedConsensus("no JSON array in consensus")
    try:
        items = json.loads(m.group(0))
    except json.JSONDecodeError as exc:
        raise MalformedConsensus(f"consensus is not valid JSON: {exc.msg}") from None
    if not isinstance(items, list):
        raise MalformedConsensus("consensus is not an array")

    def note(msg: str) -> None:
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)

    out = []
    seen: set[tuple[str, str, str]] = set()
    for pos, item in enumerate(items):
        if not isinstance(item, dict):
            note(f"consensus item {pos} is not an object; dropped")
            continue
        fields = {}
        for key in ("head", "relation", "tail"):
            value = item.get(key)
            if not isinstance(value, str) or not value.strip():
                note(f"consensus item {pos} lacks {key!r}; dropped")
                break
            fields[key] = " ".join(value.split())
        else:
            def text_of(key: str) -> str:
                value = item.get(key, "")
                return value.strip() if isinstance(value, str) else ""

            key3 = (slugify(fields["head"]), slugify(fields["relation"]), slugify(fields["tail"]))
            if key3 in seen:
                note(f"consensus item {pos} repeats an earlier triple; dropped")
                continue
            seen.add(key3)
            out.append(CandidateTriple(
                fields["head"], fields["relation"], fields["tail"],
                text_of("head_description"), text_of("tail_description"),
                text_of("description") or text_of("edge_description"),
            ))
    return out


def fresh_id(graph: KnowledgeGraph, base: str) -> str:
    """``base``, or ``base-2``, ``base-3``... whichever is not yet in use."""
    candidate, n = base, 2
    while graph.id_in_use(candidate):
        candidate = f"{base}-{n}"
        n += 1
    return candidate


def edge_id_base(head_id: str, predicate: str, tail_id: str) -> str:
    return f"{head_id}--{slugify(predicate)}--{tail_id}"


class Refiner:
    """Runs insertion and refinement against one graph for a sequence of sessions."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        gateway: ModelGateway,
        config: RefineConfig | None = None,
        index: EmbeddingIndex | None = None,
    ) -> None:
        self.graph = graph
        self.gateway = gateway
        self.config = config or RefineConfig()
        self.index = index

    # -- insertion ----------------------------------------------------------

    def _fact_context(self, c: CandidateTriple, query_context: str) -> str:
        lines = [f"Head: {c.head_name}" + (f" ({c.head_description})" if c.head_description else ""),
                 f"Relation: {c.predicate}",
                 f"Tail: {c.tail_name}" + (f" ({c.tail_description})" if c.tail_description else "")]
        if c.edge_description:
            lines.append(f"Statement: {c.edge_description}")
        lines.append(f"Context: {query_context}")
        return "\n".join(lines)

    def _is_duplicate(self, c: CandidateTriple) -> bool:
        head = self.graph.find_entity_by_name(c.head_name)
        tail = self.graph.find_entity_by_name(c.tail_name)
        return (head is not None and tail is not None
                and self.graph.find_edge(head.id, c.predicate, tail.id) is not None)

    def _resolve(self, name: str, description: str, score: int, session: SessionState,
                 created: list[str]) -> str:
        existing = self.graph.find_entity_by_name(name)
        if existing is not None:
            return existing.id
        entity = Entity(fresh_id(self.graph, slugify(name)), name, description,
                        Provenance.generated(session.session_id), score)
        self.graph.add_entity(entity)
        created.append(entity.id)
        return entity.id

    def _insert(self, c: CandidateTriple, score: int, session: SessionState) -> list[str]:
        created: list[str] = []
        head = self._resolve(c.head_name, c.head_description, score, session, created)
        tail = self._resolve(c.tail_name, c.tail_description, score, session, created)
        edge = Edge(fresh_id(self.graph, edge_id_base(head, c.predicate, tail)), head, tail,
                    c.predicate, c.edge_description, Provenance.generated(session.session_id), score)
        self.graph.add_edge(edge)
        created.append(edge.id)
        if self.index is not None and self.config.embed_new_entities:
            new_entities = [i for i in created if self.graph.has_entity(i)]
            if new_entities:
                names = [self.graph.entity(i).name for i in new_entities]
                for entity_id, vec in zip(new_entities, self.gateway.embed(names)):
                    self.index.upsert(entity_id, vec)
        return created

    def handle_dead_end(self, session: SessionState, query_context: str) -> RefineOutcome:
        """Generate, aggregate, parse, judge and gate candidate facts."""
        cfg = self.config
        outcome = RefineOutcome()
        samples = self.gateway.reasoner(
            prompts.render("generate", context=query_context),
            step="generate", temperature=cfg.generation_temperature, samples=cfg.sample_count,
        )
        consensus = self.gateway.aggregate(samples, query_context)
        warnings: list[str] = []
        try:
            candidates = parse_consensus(consensus, warnings)
        except MalformedConsensus as exc:
            outcome.failed_generations += 1
            session.record("generate", samples=samples, consensus=consensus,
                           error=str(exc), candidates=[])
            session.outcome.extend(outcome)
            return outcome
        session.record("generate", samples=samples, consensus=consensus, warnings=warnings,
                       candidates=[_candidate_dict(c) for c in candidates])

        for c in candidates:
            c = CandidateTriple(**{**asdict(c), "source_step": session.step})
            if self._is_duplicate(c):
                outcome.rejected.append((c, None, "duplicate"))
                continue
            try:
                score = self.gateway.judge_score(self._fact_context(c, query_context),
                                                 step="judge", subject=c.label())
            except UnparsableJudgeReply:
                session.record("judge", purpose="insert", subject=c.label(), score=None, ok=False)
                outcome.rejected.append((c, None, "judge_failure"))
                continue
            session.record("judge", purpose="insert", subject=c.label(), score=score, ok=True)
            if score <= cfg.tau:
                outcome.rejected.append((c, score, "below_threshold"))
                continue
            try:
                created = self._insert(c, score, session)
            except DuplicateId:
                outcome.rejected.append((c, score, "duplicate"))
                continue
            # freshly judged elements count as evaluated for this session
            session.rescore_cache.update(created)
            for element_id in created:
                if self.graph.has_entity(element_id):
                    session.names[element_id] = self.graph.entity(element_id).name
            outcome.inserted.extend((i, score) for i in created)
            session.record("insert", candidate=_candidate_dict(c), score=score, created=created)

        session.outcome.extend(outcome)
        return outcome

    # -- refinement ---------------------------------------------------------

    def _element_context(self, element: Entity | Edge) -> str:
        g = self.graph
        if isinstance(element, Entity):
            lines = [f"Entity: {element.name}",
                     f"Description: {element.description or '(none)'}",
                     f"Current confidence: {element.confidence}"]
            facts = g.neighbors(element.id)[:10]
            if facts:
                lines.append("Connected facts:")
                for edge, _ in facts:
                    lines.append(f"- {g.entity(edge.head).name} --{edge.predicate}--> "
                                 f"{g.entity(edge.tail).name}")
            return "\n".join(lines)
        return "\n".join([
            f"Fact: {g.entity(element.head).name} --{element.predicate}--> "
            f"{g.entity(element.tail).name}",
            f"Description: {element.description or '(none)'}",
            f"Current confidence: {element.confidence}",
        ])

    def reevaluate_node(self, element_id: str, session: SessionState,
                        context: str | None = None) -> ReevalDecision:
        """Re-score a generated entity or edge at most once per session."""
        element = self.graph.get(element_id)
        if element.is_truth:
            raise TruthImmutable(element_id)
        if element_id in session.rescore_cache:
            session.record("cache_skip", subject=element_id)
            return ReevalDecision(ReevalDecision.CACHE_SKIP, element.confidence)

        prompt = prompts.render("reevaluate", element=self._element_context(element),
                                context=context or session.query)
        try:
            reply = self.gateway.judge(prompt, step="reevaluate", subject=element_id)
        except UnparsableJudgeReply:
            # not cached: a later encounter may retry
            session.record("judge", purpose="reevaluate", subject=element_id, score=None, ok=False)
            return ReevalDecision(ReevalDecision.JUDGE_FAILED, element.confidence)

        old = element.confidence
        new = combine_confidence(old, reply.score, self.config.combine_alpha)
        session.record("judge", purpose="reevaluate", subject=element_id, score=reply.score,
                       ok=True, old=old, new=new, description=reply.description)
        if reply.description is not None:
            self.graph.set_description(element_id, reply.description)
        self.graph.set_confidence(element_id, new, session.session_id)
        session.rescore_cache.add(element_id)
        session.outcome.rescored.append((element_id, old, new))

        if new < self.config.tau:
            removed = self._prune(element_id)
            session.outcome.pruned.append(element_id)
            session.outcome.detached_edges.extend(removed)
            session.record("prune", subject=element_id, score=new, detached_edges=removed)
            return ReevalDecision(ReevalDecision.PRUNED, new, len(removed))
        return ReevalDecision(ReevalDecision.KEPT, new)

    def _prune(self, element_id: str) -> list[str]:
        if self.graph.has_edge(element_id):
            self.graph.remove_edge(element_id)
            return []
        incident = sorted(self.graph.adjacency(element_id))
        self.graph.remove_entity(element_id)
        if self.index is not None:
            self.index.remove(element_id)
        return incident
