"""``trail`` command line.

Exit codes: 0 answer produced, 2 abstained, 64 usage/configuration error,
65 malformed input file, 66 unreadable input, 69 model transport failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .agent_loop import TrailAgent
from .config import TrailConfig, load_config
from .embed_index import EmbeddingIndex
from .errors import (
    IoFailure,
    MalformedRecord,
    Misconfiguration,
    ScriptExhausted,
    TrailError,
    TransportFailure,
)
from .harness import (
    export_text,
    format_table,
    ingest,
    inspect_rows,
    load_bench,
    run_bench,
    sidecar_path,
)
from .kg_store import KnowledgeGraph, atomic_write_text
from .llm_gateway import (
    ChatCompletionsBackend,
    HashingEmbedder,
    ModelGateway,
    ModelRole,
    ScriptedBackend,
)

EXIT_OK = 0
EXIT_ABSTAIN = 2
EXIT_CONFIG = 64
EXIT_DATA = 65
EXIT_NOINPUT = 66
EXIT_TRANSPORT = 69

logger = logging.getLogger("trail")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with ABSTAIN
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--scripted", metavar="SCENARIO",
                        help="replay a scenario file instead of calling live models")
    common.add_argument("--out", help="output path (default: update the input graph in place)")
    common.add_argument("--frozen", action="store_true",
                        help="never write the graph back; bench items each see the starting graph")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="trail", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="build a truth graph from a fact file")
    p.add_argument("facts")
    p.add_argument("--embeddings", help="embedding sidecar keyed by entity id")
    p.add_argument("--dim", type=int, default=64,
                   help="hashing-embedding dimension when --embeddings is absent")

    p = sub.add_parser("ask", parents=[common], help="answer one query, refining the graph")
    p.add_argument("graph")
    p.add_argument("query")
    p.add_argument("--option", action="append", default=[], metavar="LETTER=TEXT",
                   help="multiple-choice option (repeatable)")
    p.add_argument("--trace", help="trace file path")

    p = sub.add_parser("bench", parents=[common], help="run a multiple-choice benchmark file")
    p.add_argument("graph")
    p.add_argument("bench")
    p.add_argument("--report", help="report path (default: <graph dir>/bench_report.json)")
    p.add_argument("--trace-dir", help="trace directory (default: <graph dir>/traces)")

    p = sub.add_parser("inspect", parents=[common], help="list graph elements")
    p.add_argument("graph")
    p.add_argument("--confidence-below", metavar="N")
    p.add_argument("--generated-only", action="store_true")

    p = sub.add_parser("export", parents=[common], help="export the graph")
    p.add_argument("graph")
    p.add_argument("--format", choices=("jsonl", "tsv"), default="jsonl")
    return parser


# -- wiring -----------------------------------------------------------------


def load_graph(path: str) -> tuple[KnowledgeGraph, EmbeddingIndex | None]:
    graph = KnowledgeGraph.load(path)
    side = sidecar_path(path)
    return graph, EmbeddingIndex.load(side) if side.exists() else None


def build_gateway(args: argparse.Namespace, config: TrailConfig, dim: int) -> ModelGateway:
    gw_config = replace(config.gateway, embedding_dim=dim)
    if args.scripted:
        script = ScriptedBackend.from_file(args.scripted)
        embedder = script if script.has_role(ModelRole.EMBEDDER) else HashingEmbedder(dim)
        backends = {ModelRole.REASONER: script, ModelRole.JUDGE: script,
                    ModelRole.AGGREGATOR: script, ModelRole.EMBEDDER: embedder}
    else:
        main = ChatCompletionsBackend.from_env()
        backends = {ModelRole.REASONER: main, ModelRole.JUDGE: ChatCompletionsBackend.from_env(judge=True),
                    ModelRole.AGGREGATOR: main, ModelRole.EMBEDDER: main}
    return ModelGateway(backends, gw_config)


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:12]


def _save(graph: KnowledgeGraph, index: EmbeddingIndex, target: str) -> None:
    graph.save(target)
    index.save(sidecar_path(target))


def _load_for_run(args: argparse.Namespace):
    config = load_config(args.config)
    graph, index = load_graph(args.graph)
    if index is None:
        index = EmbeddingIndex(config.gateway.embedding_dim)
    gateway = build_gateway(args, config, index.dim)
    return config, graph, index, gateway


# -- commands ---------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    if not args.out:
        raise UsageError("ingest needs --out <graph path>")
    summary = ingest(args.facts, args.embeddings, args.out, dim=args.dim)
    print(f"entities: {summary.entities}")
    print(f"edges: {summary.edges}")
    print(f"duplicates skipped: {summary.duplicates}")
    print(f"graph: {args.out}")
    return EXIT_OK


def _parse_options(raw: list[str]) -> dict[str, str] | None:
    if not raw:
        return None
    options = {}
    for item in raw:
        letter, sep, text = item.partition("=")
        if not sep or len(letter.strip()) != 1:
            raise UsageError(f"bad --option {item!r}; expected LETTER=TEXT")
        options[letter.strip().upper()] = text.strip()
    return options


def cmd_ask(args: argparse.Namespace) -> int:
    options = _parse_options(args.option)
    config, graph, index, gateway = _load_for_run(args)
    session_id = "ask-" + _digest(graph.dumps(), args.query)
    trace = Path(args.trace) if args.trace else Path(args.graph).parent / "traces" / f"{session_id}.jsonl"
    agent = TrailAgent.from_config(graph, index, gateway, config)
    result = agent.run_query(args.query, options=options, session_id=session_id, trace_path=trace)

    if not args.frozen:
        _save(graph, index, args.out or args.graph)
    print(f"answer: {result.answer}")
    if result.supporting_facts:
        print("supporting facts:")
        for n, fact in zip(result.citations, result.supporting_facts):
            print(f"  [{n}] {fact['head']} --{fact['predicate']}--> {fact['tail']} "
                  f"({fact['kind']}, {fact['confidence']})")
    print(f"kg_delta: {result.kg_delta.summary()}")
    stats = graph.stats()
    print(f"graph: {stats.entities} entities, {stats.edges} edges")
    print(f"trace: {trace}")
    return EXIT_ABSTAIN if result.abstained else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config, graph, index, gateway = _load_for_run(args)
    items, skipped = load_bench(args.bench)
    base = Path(args.graph).parent
    report_path = Path(args.report) if args.report else base / "bench_report.json"
    trace_dir = Path(args.trace_dir) if args.trace_dir else base / "traces"
    prefix = "bench-" + _digest(graph.dumps(), Path(args.bench).read_text(encoding="utf-8"))
    report = run_bench(graph, index, gateway, config, items, session_prefix=prefix,
                       trace_dir=trace_dir, frozen=args.frozen, skipped=skipped)
    report.write(report_path)
    if not args.frozen:
        _save(graph, index, args.out or args.graph)
    print(f"accuracy: {report.accuracy:.4f} ({report.correct}/{report.total}), "
          f"abstained: {report.abstained}, skipped: {len(report.skipped)}")
    growth = report.kg_growth
    print(f"entities: {growth['entities_before']} -> {growth['entities_after']}, "
          f"edges: {growth['edges_before']} -> {growth['edges_after']}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    below = None
    if args.confidence_below is not None:
        try:
            below = int(args.confidence_below)
        except ValueError:
            raise UsageError(f"--confidence-below needs an integer, got {args.confidence_below!r}")
        if not 0 <= below <= 101:
            raise UsageError("--confidence-below must lie in [0, 101]")
    graph, _ = load_graph(args.graph)
    sys.stdout.write(format_table(inspect_rows(graph, below, args.generated_only)))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    graph, _ = load_graph(args.graph)
    text = export_text(graph, args.format)
    if args.out:
        atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "ask": cmd_ask, "bench": cmd_bench,
            "inspect": cmd_inspect, "export": cmd_export}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"trail: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, Misconfiguration) as exc:
        print(f"trail: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedRecord as exc:
        print(f"trail: malformed input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IoFailure as exc:
        print(f"trail: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except (TransportFailure, ScriptExhausted) as exc:
        print(f"trail: model transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except TrailError as exc:
        print(f"trail: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
