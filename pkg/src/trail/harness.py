"""Library side of the command line: ingestion, benchmarking, inspection, export."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .agent_loop import TrailAgent
from .config import TrailConfig
from .embed_index import EmbeddingIndex
from .errors import IoFailure, MalformedRecord
from .kg_store import (
    Edge,
    Entity,
    KnowledgeGraph,
    Provenance,
    atomic_write_text,
    jsonl_lines,
    slugify,
)
from .llm_gateway import HashingEmbedder, ModelGateway
from .refine import edge_id_base, fresh_id

logger = logging.getLogger(__name__)


def sidecar_path(graph_path: str | os.PathLike) -> Path:
    """``kg.jsonl`` -> ``kg.emb.jsonl``."""
    p = Path(graph_path)
    stem = p.name[: -len(p.suffix)] if p.suffix else p.name
    return p.with_name(stem + ".emb.jsonl")


def _read_lines(path: str | os.PathLike) -> list[str]:
    try:
        return jsonl_lines(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


# -- ingest -----------------------------------------------------------------


@dataclass(frozen=True)
class FactRecord:
    head_name: str
    predicate: str
    tail_name: str
    head_description: str = ""
    tail_description: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        for name in ("head_name", "predicate", "tail_name"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} is blank")


FACT_FIELDS = {"head", "predicate", "relation", "tail", "head_description",
               "tail_description", "description"}


def parse_fact(obj: Any) -> FactRecord:
    if not isinstance(obj, dict):
        raise ValueError("fact record is not an object")
    unknown = set(obj) - FACT_FIELDS
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    if ("predicate" in obj) == ("relation" in obj):
        raise ValueError("exactly one of 'predicate' or 'relation' is required")
    for key, value in obj.items():
        if not isinstance(value, str):
            raise ValueError(f"{key} must be a string")
    return FactRecord(
        obj.get("head", ""), obj.get("predicate", obj.get("relation", "")), obj.get("tail", ""),
        obj.get("head_description", ""), obj.get("tail_description", ""), obj.get("description", ""),
    )


def load_facts(path: str | os.PathLike) -> list[FactRecord]:
    facts = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            facts.append(parse_fact(json.loads(line)))
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc), str(path)) from None
    return facts


@dataclass
class IngestSummary:
    entities: int
    edges: int
    duplicates: int


def build_truth_graph(facts: Iterable[FactRecord]) -> tuple[KnowledgeGraph, int]:
    """Truth graph from fact records; entities dedup by name slug. Returns (graph, duplicates).

    An entity takes the name of its first mention and the first non-empty
    description seen for it.
    """
    facts = list(facts)
    seen: dict[str, list[str]] = {}
    for fact in facts:
        for name, description in ((fact.head_name, fact.head_description),
                                  (fact.tail_name, fact.tail_description)):
            entry = seen.setdefault(slugify(name), [name.strip(), ""])
            if description and not entry[1]:
                entry[1] = description
    graph = KnowledgeGraph()
    for entity_id, (name, description) in seen.items():
        graph.add_entity(Entity(entity_id, name, description, Provenance.truth(), 100))

    duplicates = 0
    for fact in facts:
        head, tail = slugify(fact.head_name), slugify(fact.tail_name)
        if graph.find_edge(head, fact.predicate, tail) is not None:
            duplicates += 1
            logger.warning("duplicate fact skipped: %s %s %s", head, fact.predicate, tail)
            continue
        graph.add_edge(Edge(fresh_id(graph, edge_id_base(head, fact.predicate, tail)), head, tail,
                            fact.predicate.strip(), fact.description, Provenance.truth(), 100))
    return graph, duplicates


def ingest(facts_path: str | os.PathLike, embeddings_path: str | os.PathLike | None,
           out_graph_path: str | os.PathLike, dim: int = 64) -> IngestSummary:
    graph, duplicates = build_truth_graph(load_facts(facts_path))
    if embeddings_path is not None:
        loaded = EmbeddingIndex.load(embeddings_path)
        index = EmbeddingIndex(loaded.dim)
        for entity_id in loaded.ids():
            if graph.has_entity(entity_id):
                index.upsert(entity_id, loaded.get(entity_id))
            else:
                logger.warning("embedding for unknown entity %r ignored", entity_id)
    else:
        embedder = HashingEmbedder(dim)
        index = EmbeddingIndex(dim)
        for entity in graph.iter_entities():
            index.upsert(entity.id, embedder.vector(entity.name))
    graph.save(out_graph_path)
    index.save(sidecar_path(out_graph_path))
    stats = graph.stats()
    return IngestSummary(stats.entities, stats.edges, duplicates)


# -- bench ------------------------------------------------------------------


@dataclass(frozen=True)
class BenchItem:
    id: str
    question: str
    options: dict[str, str]
    gold: str

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError("a bench item needs at least two options")
        if self.gold not in self.options:
            raise ValueError(f"gold {self.gold!r} is not an option")


def parse_bench_item(obj: Any) -> BenchItem:
    if not isinstance(obj, dict):
        raise ValueError("bench item is not an object")
    for key in ("id", "question", "options", "gold"):
        if key not in obj:
            raise ValueError(f"missing {key!r}")
    options = obj["options"]
    if not isinstance(options, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in options.items()):
        raise ValueError("options must map letters to texts")
    if not isinstance(obj["question"], str) or not isinstance(obj["gold"], str):
        raise ValueError("question and gold must be strings")
    return BenchItem(str(obj["id"]), obj["question"], {k.upper(): v for k, v in options.items()},
                     obj["gold"].upper())


def load_bench(path: str | os.PathLike) -> tuple[list[BenchItem], list[dict[str, Any]]]:
    """Items in file order plus a list of skipped lines with reasons."""
    items, skipped = [], []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            items.append(parse_bench_item(json.loads(line)))
        except ValueError as exc:
            logger.warning("bench line %d skipped: %s", lineno, exc)
            skipped.append({"line": lineno, "reason": str(exc)})
    return items, skipped


@dataclass
class BenchReport:
    total: int = 0
    correct: int = 0
    abstained: int = 0
    accuracy: float = 0.0
    per_item: list[dict[str, Any]] = field(default_factory=list)
    kg_growth: dict[str, Any] = field(default_factory=dict)
    skipped: list[dict[str, Any]] = field(default_factory=list)
    frozen: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, ensure_ascii=False) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        atomic_write_text(Path(path), self.to_json())


def run_bench(
    graph: KnowledgeGraph,
    index: EmbeddingIndex,
    gateway: ModelGateway,
    config: TrailConfig,
    items: list[BenchItem],
    *,
    session_prefix: str = "bench",
    trace_dir: str | os.PathLike | None = None,
    frozen: bool = False,
    skipped: list[dict[str, Any]] | None = None,
    on_item: Callable[[BenchItem, Any], None] | None = None,
) -> BenchReport:
    """Run every item as its own session against the evolving graph, in order.

    With ``frozen`` each item sees a private copy of the starting graph and
    ``graph`` is left untouched.
    """
    before = graph.stats()
    report = BenchReport(skipped=list(skipped or []), frozen=frozen)
    series = []
    shared = None if frozen else TrailAgent.from_config(graph, index, gateway, config)
    for item in items:
        agent = shared or TrailAgent.from_config(graph.copy(), index.copy(), gateway, config)
        trace = Path(trace_dir) / f"{slugify(item.id)}.trace.jsonl" if trace_dir else None
        result = agent.run_query(item.question, options=item.options,
                                 session_id=f"{session_prefix}-{item.id}", trace_path=trace)
        ok = result.answer == item.gold
        report.total += 1
        report.correct += ok
        report.abstained += result.abstained
        report.per_item.append({"id": item.id, "predicted": result.answer, "gold": item.gold,
                                "correct": ok})
        now = agent.graph.stats()
        series.append({"id": item.id, "entities": now.entities, "edges": now.edges,
                       "generated_entities": now.generated_entities,
                       "generated_edges": now.generated_edges})
        if on_item is not None:
            on_item(item, result)
    after = graph.stats()
    report.accuracy = report.correct / report.total if report.total else 0.0
    report.kg_growth = {
        "entities_before": before.entities, "entities_after": after.entities,
        "edges_before": before.edges, "edges_after": after.edges,
        "series": series,
    }
    return report


# -- inspect / export -------------------------------------------------------


def inspect_rows(graph: KnowledgeGraph, confidence_below: int | None = None,
                 generated_only: bool = False) -> list[dict[str, Any]]:
    rows = []
    for element in [*graph.iter_entities(), *graph.iter_edges()]:
        if generated_only and element.is_truth:
            continue
        if confidence_below is not None and element.confidence >= confidence_below:
            continue
        if isinstance(element, Entity):
            label, kind = element.name, "entity"
        else:
            head, tail = graph.entity(element.head).name, graph.entity(element.tail).name
            label, kind = f"{head} --{element.predicate}--> {tail}", "edge"
        rows.append({"type": kind, "id": element.id, "kind": element.provenance.kind.value,
                     "confidence": element.confidence, "label": label})
    return rows


def format_table(rows: list[dict[str, Any]]) -> str:
    cols = ("type", "id", "kind", "confidence", "label")
    lines = ["\t".join(cols)]
    lines += ["\t".join(str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def export_text(graph: KnowledgeGraph, fmt: str) -> str:
    if fmt == "jsonl":
        return graph.dumps()
    if fmt == "tsv":
        lines = ["head\tpredicate\ttail\tkind\tconfidence"]
        for e in graph.iter_edges():
            lines.append("\t".join([graph.entity(e.head).name, e.predicate,
                                    graph.entity(e.tail).name, e.provenance.kind.value,
                                    str(e.confidence)]))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown export format {fmt!r}")
