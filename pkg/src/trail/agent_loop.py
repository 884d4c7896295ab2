"""Per-query reasoning loop: seed, then Search / Generate / Answer until done.

Each step the reasoner sees the query, the evidence gathered so far and a
numbered menu of unexplored edges leaving the reached entities. An empty menu
is a structural dead end and forces a Generate step without asking the model;
exhausting the hop budget forces an Answer. Walking onto a generated element
triggers its once-per-session re-evaluation before it may become evidence.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

from . import prompts
from .embed_index import EmbeddingIndex
from .errors import EmptyIndex, InvalidSelection, SeedFailure, TransportFailure
from .kg_store import Edge, KnowledgeGraph
from .llm_gateway import REASK_LIMIT, ModelGateway
from .refine import Refiner, RefineConfig, RefineOutcome, ReevalDecision
from .seed_select import (
    CandidatePool,
    SeedConfig,
    SeedSet,
    anchor_entities,
    identify_topics,
    lexical_fallback,
    select_seeds,
)
from .session import EvidenceItem, SessionState

logger = logging.getLogger(__name__)

ABSTAIN = "ABSTAIN"


@dataclass(frozen=True)
class AgentConfig:
    max_hops: int = 6
    max_generates: int = 2

    def __post_init__(self) -> None:
        if self.max_hops < 0 or self.max_generates < 0:
            raise ValueError("agent budgets must be >= 0")


@dataclass(frozen=True)
class Search:
    edges: tuple[str, ...]


@dataclass(frozen=True)
class Generate:
    forced: bool = False


@dataclass(frozen=True)
class Answer:
    draft: str = ""
    reason: str = "reasoner"


AgentAction = Union[Search, Generate, Answer]


@dataclass(frozen=True)
class MenuItem:
    edge: Edge
    near: str
    far: str


@dataclass
class AnswerResult:
    answer: str
    supporting_facts: list[dict]
    kg_delta: RefineOutcome
    trace_path: Path | None
    session_id: str
    citations: list[int] = field(default_factory=list)

    @property
    def abstained(self) -> bool:
        return self.answer == ABSTAIN


_DECISION = re.compile(r"^\s*(SEARCH|GENERATE|ANSWER)\b\s*:?\s*(.*)$", re.IGNORECASE | re.MULTILINE)
_CITES = re.compile(r"\[([^\]]*)\]")


def parse_decision(reply: str) -> tuple[str, list[int], str] | None:
    """(kind, edge numbers, draft) from a decide reply, or None if unparsable."""
    m = _DECISION.search(reply)
    if m is None:
        return None
    kind, rest = m.group(1).upper(), m.group(2).strip()
    if kind == "SEARCH":
        numbers = [int(n) for n in re.findall(r"\d+", rest)]
        return (kind, numbers, "") if numbers else None
    return kind, [], rest


def parse_answer(reply: str, options: list[str] | None) -> tuple[str, list[int]] | None:
    """Answer text (an option letter when ``options`` is given) and cited indices."""
    citations: list[int] = []
    for group in _CITES.findall(reply):
        for n in re.findall(r"\d+", group):
            if int(n) not in citations:
                citations.append(int(n))
    if options is not None:
        allowed = {o.upper() for o in options}
        m = re.match(r"\s*(?:answer\s*[:\-]?\s*)?\(?([A-Za-z])\)?(?![A-Za-z])", reply, re.IGNORECASE)
        if m is None or m.group(1).upper() not in allowed:
            return None
        return m.group(1).upper(), citations
    first = reply.strip().splitlines()[0] if reply.strip() else ""
    first = re.sub(r"^\s*answer\s*:\s*", "", first, flags=re.IGNORECASE)
    first = re.split(r",?\s*(?:citing|cites?:)\s*\[|\s*\[", first, maxsplit=1, flags=re.IGNORECASE)[0]
    first = first.strip().rstrip(",;").strip()
    return (first, citations) if first else None


def format_query(question: str, options: Mapping[str, str] | None) -> str:
    if not options:
        return question
    lines = [question, "Options:"]
    lines += [f"{k}. {v}" for k, v in options.items()]
    return "\n".join(lines)


class TrailAgent:
    """Answers queries against one graph, refining it as it reasons."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        index: EmbeddingIndex,
        gateway: ModelGateway,
        *,
        seed_config: SeedConfig | None = None,
        refine_config: RefineConfig | None = None,
        agent_config: AgentConfig | None = None,
    ) -> None:
        self.graph = graph
        self.index = index
        self.gateway = gateway
        self.seed_config = seed_config or SeedConfig()
        self.config = agent_config or AgentConfig()
        self.refiner = Refiner(graph, gateway, refine_config, index)
        self.last_session: SessionState | None = None
        self._sessions = 0

    @classmethod
    def from_config(cls, graph: KnowledgeGraph, index: EmbeddingIndex, gateway: ModelGateway,
                    config) -> TrailAgent:
        return cls(graph, index, gateway, seed_config=config.seed,
                   refine_config=config.refine, agent_config=config.agent)

    # -- helpers ------------------------------------------------------------

    def _session_id(self, query: str) -> str:
        self._sessions += 1
        digest = hashlib.sha256(query.encode("utf-8")).hexdigest()[:10]
        return f"q{self._sessions:04d}-{digest}"

    def _evidence_text(self, state: SessionState) -> str:
        if not state.evidence:
            return "(none yet)"
        return "\n".join(f"[{i}] {item.describe(state.names)}"
                         for i, item in enumerate(state.evidence, 1))

    def context_text(self, state: SessionState) -> str:
        reached = []
        for eid in sorted(state.visited_entities):
            if self.graph.has_entity(eid):
                e = self.graph.entity(eid)
                reached.append(f"- {e.name}" + (f": {e.description}" if e.description else ""))
        return "\n".join([
            f"Question:\n{state.query}",
            "Entities reached:",
            "\n".join(reached) or "(none)",
            "Evidence:",
            self._evidence_text(state),
        ])

    def _enter(self, state: SessionState, entity_id: str) -> None:
        state.visited_entities.add(entity_id)
        state.names[entity_id] = self.graph.entity(entity_id).name

    def menu(self, state: SessionState) -> list[MenuItem]:
        """Unexplored edges from reached entities to entities not yet reached, by edge id."""
        items: dict[str, MenuItem] = {}
        for near in sorted(state.visited_entities):
            if not self.graph.has_entity(near):
                continue
            for edge, far in self.graph.neighbors(near):
                if edge.id in state.traversed_edges or far.id in state.visited_entities:
                    continue
                items.setdefault(edge.id, MenuItem(edge, near, far.id))
        menu = [items[k] for k in sorted(items)]
        state.frontier = {item.near for item in menu}
        return menu

    def _flag_stale_evidence(self, state: SessionState) -> list[int]:
        flagged = []
        for i, item in enumerate(state.evidence, 1):
            if item.pruned_after_use:
                continue
            if not (self.graph.has_edge(item.edge.id) and self.graph.has_entity(item.entity.id)):
                item.pruned_after_use = True
                flagged.append(i)
        return flagged

    # -- stages -------------------------------------------------------------

    def seed(self, state: SessionState) -> SeedSet:
        if not self.graph.stats().entities:
            raise SeedFailure("cannot seed an empty graph")
        cfg = self.seed_config
        topics = identify_topics(state.query, self.gateway, cfg)
        try:
            pool = anchor_entities(topics, cfg.top_k, graph=self.graph, index=self.index,
                                   gateway=self.gateway)
        except EmptyIndex:
            pool = CandidatePool()
        if pool.union:
            seeds = select_seeds(pool, topics, state.query, graph=self.graph,
                                 gateway=self.gateway, config=cfg)
        else:
            seeds = SeedSet(tuple(lexical_fallback(state.query, self.graph, cfg.max_seeds)),
                            fallback=True)
        for entity_id in seeds.seeds:
            self._enter(state, entity_id)
        state.record(
            "seed",
            topics=list(topics.topics),
            topic_fallback=topics.fallback,
            pool=[{"id": p.entity_id, "score": round(p.score, 9), "degree": p.degree}
                  for p in pool.union],
            seeds=list(seeds.seeds),
            seed_fallback=seeds.fallback,
        )
        return seeds

    def decide_action(self, state: SessionState) -> AgentAction:
        cfg = self.config
        menu = self.menu(state)
        generates_left = cfg.max_generates - state.generate_count
        replies: list[str] = []
        if state.hop_count >= cfg.max_hops:
            action: AgentAction = Answer(reason="hop_budget")
        elif not menu:
            action = Generate(forced=True) if generates_left > 0 else Answer(reason="dead_end")
        else:
            action = self._ask(state, menu, generates_left, replies)
        state.record("decide", action=_action_dict(action), menu=[m.edge.id for m in menu],
                     replies=replies)
        return action

    def _ask(self, state: SessionState, menu: list[MenuItem], generates_left: int,
             replies: list[str]) -> AgentAction:
        names = state.names
        lines = []
        for n, item in enumerate(menu, 1):
            e = item.edge
            head = names.get(e.head) or self.graph.entity(e.head).name
            tail = names.get(e.tail) or self.graph.entity(e.tail).name
            lines.append(f"{n}. {head} --{e.predicate}--> {tail} "
                         f"({e.provenance.kind.value}, {e.confidence})")
        prompt = prompts.render(
            "decide", query=state.query, evidence=self._evidence_text(state),
            menu="\n".join(lines), hops=state.hop_count, max_hops=self.config.max_hops,
            generates_left=generates_left,
        )
        text = prompt
        reasked_invalid = False
        for _ in range(REASK_LIMIT + 1):
            (reply,) = self.gateway.reasoner(text, step="decide")
            replies.append(reply)
            parsed = parse_decision(reply)
            if parsed is None:
                text = prompt + "\n\nReply with exactly one line: SEARCH: <numbers>, GENERATE or ANSWER."
                continue
            kind, numbers, draft = parsed
            if kind == "ANSWER":
                return Answer(draft)
            if kind == "GENERATE":
                return Generate() if generates_left > 0 else Answer(reason="generate_budget")
            invalid = [n for n in numbers if not 1 <= n <= len(menu)]
            if invalid and not reasked_invalid:
                reasked_invalid = True
                text = prompt + (f"\n\nEdges {invalid} are not in the list; "
                                 f"choose numbers between 1 and {len(menu)}.")
                continue
            chosen: list[str] = []
            for n in numbers:
                if 1 <= n <= len(menu) and menu[n - 1].edge.id not in chosen:
                    chosen.append(menu[n - 1].edge.id)
            return Search(tuple(chosen)) if chosen else Answer(reason="invalid_selection")
        return Answer(reason="unparsable")

    def apply_search(self, state: SessionState, edge_ids: tuple[str, ...] | list[str]) -> SessionState:
        offered = {m.edge.id: m for m in self.menu(state)}
        outside = [e for e in edge_ids if e not in offered]
        if outside:
            raise InvalidSelection(f"edges not in the menu: {outside}")
        state.hop_count += 1
        context = self.context_text(state)
        results = []
        for edge_id in edge_ids:
            item = offered[edge_id]
            status = "entered"
            for element_id in (edge_id, item.far):
                if element_id not in self.graph:
                    status = "gone"
                    break
                if self.graph.get(element_id).is_truth:
                    continue
                decision = self.refiner.reevaluate_node(element_id, state, context)
                if decision.kind == ReevalDecision.PRUNED:
                    status = f"pruned:{element_id}"
                    break
            if status == "entered":
                edge = self.graph.edge(edge_id)
                entity = self.graph.entity(item.far)
                state.evidence.append(EvidenceItem(edge, entity))
                state.traversed_edges.add(edge_id)
                self._enter(state, item.far)
            results.append({"edge": edge_id, "far": item.far, "status": status})
        state.record("search", results=results, hop=state.hop_count,
                     evidence_flagged=self._flag_stale_evidence(state))
        return state

    def apply_generate(self, state: SessionState) -> RefineOutcome:
        state.generate_count += 1
        return self.refiner.handle_dead_end(state, self.context_text(state))

    def synthesize_answer(self, state: SessionState, options: Mapping[str, str] | None = None,
                          draft: str = "", trace_path: Path | None = None) -> AnswerResult:
        letters = list(options) if options else None
        if letters:
            instruction = ("Reply with the letter of the correct option, then the evidence you "
                           "relied on, for example: B, citing [1, 3]")
            option_block = "\nOptions:\n" + "\n".join(f"{k}. {v}" for k, v in options.items()) + "\n"
        else:
            instruction = ("Reply with the answer on one line, then the evidence you relied on, "
                           "for example: <answer>, citing [1, 3]")
            option_block = ""
        if draft:
            instruction = f"A draft answer was proposed: {draft}\n{instruction}"
        prompt = prompts.render("answer", query=state.query, options=option_block,
                                evidence=self._evidence_text(state), instruction=instruction)
        text, parsed, replies = prompt, None, []
        for _ in range(REASK_LIMIT + 1):
            (reply,) = self.gateway.reasoner(text, step="answer")
            replies.append(reply)
            parsed = parse_answer(reply, letters)
            if parsed is not None:
                break
            text = prompt + "\n\nFollow the reply format exactly."
        self._flag_stale_evidence(state)
        if parsed is None:
            answer, cited = ABSTAIN, []
        else:
            answer = parsed[0]
            cited = [i for i in parsed[1] if 1 <= i <= len(state.evidence)]
        facts = [state.evidence[i - 1].triple(state.names) for i in cited]
        state.record("answer", answer=answer, citations=cited, replies=replies,
                     outcome=state.outcome.to_dict())
        return AnswerResult(answer, facts, state.outcome, trace_path, state.session_id, cited)

    # -- driver -------------------------------------------------------------

    def run_query(
        self,
        query: str,
        *,
        options: Mapping[str, str] | None = None,
        session_id: str | None = None,
        trace_path: str | os.PathLike | None = None,
    ) -> AnswerResult:
        text = format_query(query, options)
        state = SessionState(session_id or self._session_id(text), text)
        path = Path(trace_path) if trace_path is not None else None
        self.last_session = state
        try:
            self.seed(state)
            while True:
                state.step += 1
                action = self.decide_action(state)
                if isinstance(action, Search):
                    self.apply_search(state, action.edges)
                elif isinstance(action, Generate):
                    self.apply_generate(state)
                else:
                    return self.synthesize_answer(state, options, action.draft, path)
        except TransportFailure:
            logger.error("transport failure in session %s; trace is partial", state.session_id)
            raise
        finally:
            if path is not None:
                state.write_trace(path)


def _action_dict(action: AgentAction) -> dict:
    if isinstance(action, Search):
        return {"kind": "search", "edges": list(action.edges)}
    if isinstance(action, Generate):
        return {"kind": "generate", "forced": action.forced}
    return {"kind": "answer", "draft": action.draft, "reason": action.reason}
