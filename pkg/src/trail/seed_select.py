"""Choosing where reasoning enters the graph.

Three stages: the reasoner names the query's core topics, each topic is
embedded and anchored to its Top-K most similar entities, and the reasoner
picks the final seeds from the pooled candidates (shown with similarity and
node degree). Every model stage has a deterministic fallback, so a
non-empty graph always yields at least one seed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from . import prompts
from .embed_index import EmbeddingIndex
from .errors import EmptyIndex, SeedFailure
from .kg_store import KnowledgeGraph, slugify
from .llm_gateway import REASK_LIMIT, ModelGateway

logger = logging.getLogger(__name__)

MAX_TOPIC_WORDS = 8


@dataclass(frozen=True)
class SeedConfig:
    top_k: int = 5
    max_topics: int = 5
    max_seeds: int = 3

    def __post_init__(self) -> None:
        if min(self.top_k, self.max_topics, self.max_seeds) < 1:
            raise ValueError("seed.top_k, seed.max_topics and seed.max_seeds must be >= 1")


@dataclass(frozen=True)
class TopicSet:
    topics: tuple[str, ...]
    fallback: bool = False

    def __post_init__(self) -> None:
        if not self.topics or any(not t.strip() for t in self.topics):
            raise ValueError("a topic set needs at least one non-blank topic")


@dataclass(frozen=True)
class PoolEntry:
    entity_id: str
    score: float
    degree: int


@dataclass
class CandidatePool:
    per_topic: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    union: list[PoolEntry] = field(default_factory=list)

    def ids(self) -> list[str]:
        return [p.entity_id for p in self.union]

    def __len__(self) -> int:
        return len(self.union)


@dataclass(frozen=True)
class SeedSet:
    seeds: tuple[str, ...]
    fallback: bool = False


def parse_topics(reply: str, max_topics: int) -> list[str]:
    """Split a topic reply on ';' or newlines, strip list markers, dedup case-insensitively."""
    out: list[str] = []
    seen: set[str] = set()
    for part in re.split(r"[;\n]", reply):
        topic = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", part).strip().strip(".").strip()
        if not topic or len(topic.split()) > MAX_TOPIC_WORDS:
            continue
        key = topic.casefold()
        if key not in seen:
            seen.add(key)
            out.append(topic)
    return out[:max_topics]


def identify_topics(query: str, gateway: ModelGateway, config: SeedConfig | None = None) -> TopicSet:
    config = config or SeedConfig()
    if not query.strip():
        raise ValueError("query is blank")
    prompt = prompts.render("topics", query=query, max_topics=config.max_topics)
    for _ in range(REASK_LIMIT + 1):
        (reply,) = gateway.reasoner(prompt, step="topics")
        topics = parse_topics(reply, config.max_topics)
        if topics:
            return TopicSet(tuple(topics))
    logger.warning("topic extraction failed; using the raw query as the only topic")
    return TopicSet((query.strip(),), fallback=True)


def anchor_entities(topics: TopicSet, k: int, *, graph: KnowledgeGraph, index: EmbeddingIndex,
                    gateway: ModelGateway) -> CandidatePool:
    if len(index) == 0:
        raise EmptyIndex("entity embedding index is empty")
    vectors = gateway.embed(list(topics.topics), step="embed")
    pool = CandidatePool()
    best: dict[str, float] = {}
    order: list[str] = []
    for topic, vec in zip(topics.topics, vectors):
        if not vec.any():
            pool.per_topic[topic] = []
            continue
        hits = [(i, s) for i, s in index.top_k(vec, k) if graph.has_entity(i)]
        pool.per_topic[topic] = hits
        for entity_id, score in hits:
            if entity_id not in best:
                order.append(entity_id)
                best[entity_id] = score
            else:
                best[entity_id] = max(best[entity_id], score)
    pool.union = [PoolEntry(i, best[i], graph.degree(i)) for i in order]
    return pool


def _candidate_lines(pool: CandidatePool, graph: KnowledgeGraph) -> str:
    lines = []
    for p in pool.union:
        e = graph.entity(p.entity_id)
        desc = " ".join(e.description.split())
        if len(desc) > 120:
            desc = desc[:117] + "..."
        lines.append(f"{p.entity_id} | {e.name} | {p.score:.3f} | {p.degree} | {desc}")
    return "\n".join(lines)


def parse_seed_reply(reply: str) -> list[str]:
    m = re.search(r"seeds?\s*:\s*(.*)", reply, re.IGNORECASE | re.DOTALL)
    body = m.group(1) if m else reply
    return [t.strip().strip("`'\"[]") for t in re.split(r"[,\n]", body) if t.strip()]


def best_per_topic(pool: CandidatePool, max_seeds: int) -> list[str]:
    out: list[str] = []
    for hits in pool.per_topic.values():
        if hits and hits[0][0] not in out:
            out.append(hits[0][0])
    return out[:max_seeds]


def select_seeds(pool: CandidatePool, topics: TopicSet, query: str, *, graph: KnowledgeGraph,
                 gateway: ModelGateway, config: SeedConfig | None = None) -> SeedSet:
    config = config or SeedConfig()
    if not pool.union:
        raise ValueError("candidate pool is empty")
    members = set(pool.ids())
    prompt = prompts.render(
        "seeds", query=query, topics="; ".join(topics.topics),
        candidates=_candidate_lines(pool, graph), max_seeds=config.max_seeds,
    )
    for _ in range(REASK_LIMIT + 1):
        (reply,) = gateway.reasoner(prompt, step="seeds")
        chosen: list[str] = []
        for token in parse_seed_reply(reply):
            if token in members and token not in chosen:
                chosen.append(token)
        if chosen:
            return SeedSet(tuple(chosen[: config.max_seeds]))
    logger.warning("seed selection failed; falling back to best similarity per topic")
    return SeedSet(tuple(best_per_topic(pool, config.max_seeds)), fallback=True)


def lexical_fallback(query: str, graph: KnowledgeGraph, max_seeds: int) -> list[str]:
    """Seeds when no embeddings exist: entities named in the query, else the lowest id."""
    q = f"-{slugify(query)}-"
    named = [e.id for e in graph.iter_entities() if f"-{slugify(e.name)}-" in q]
    if named:
        return named[:max_seeds]
    first = next(graph.iter_entities(), None)
    if first is None:
        raise SeedFailure("graph is empty")
    return [first.id]
