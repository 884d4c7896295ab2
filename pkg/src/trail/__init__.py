"""Multi-hop question answering over an incomplete knowledge graph that
generates, scores, inserts, re-evaluates and prunes facts while it reasons."""

from .agent_loop import ABSTAIN, AgentConfig, AnswerResult, TrailAgent
from .config import TrailConfig, load_config
from .embed_index import EmbeddingIndex, cosine
from .kg_store import Edge, Entity, GraphStats, KnowledgeGraph, Kind, Provenance
from .llm_gateway import (
    CompletionRequest,
    GatewayConfig,
    HashingEmbedder,
    MappingEmbedder,
    ModelGateway,
    ModelRole,
    ScriptedBackend,
)
from .refine import CandidateTriple, RefineConfig, RefineOutcome, Refiner, combine_confidence
from .seed_select import SeedConfig
from .session import SessionState

__all__ = [
    "ABSTAIN", "AgentConfig", "AnswerResult", "CandidateTriple", "CompletionRequest", "Edge",
    "EmbeddingIndex", "Entity", "GatewayConfig", "GraphStats", "HashingEmbedder", "Kind",
    "KnowledgeGraph", "MappingEmbedder", "ModelGateway", "ModelRole", "Provenance",
    "RefineConfig", "RefineOutcome", "Refiner", "ScriptedBackend", "SeedConfig", "SessionState",
    "TrailAgent", "TrailConfig", "combine_confidence", "cosine", "load_config",
]

__version__ = "0.1.0"
