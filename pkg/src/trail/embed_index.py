"""Exact cosine-similarity index over entity embeddings."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, IoFailure, MalformedRecord, ZeroNorm
from .kg_store import atomic_write_text, jsonl_lines


def _as_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    return vec


def cosine(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """dot(u, v) / (|u| |v|), clipped to [-1, 1]."""
    a, b = _as_vector(u), _as_vector(v)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape[0]} != {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class EmbeddingIndex:
    """Linear-scan Top-K retrieval; ties broken by ascending entity id.

    A zero vector is the "missing embedding" sentinel: it is accepted by
    :meth:`upsert` but the entity is then invisible to :meth:`top_k`.
    """

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        self._cache: tuple[list[str], np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return sum(1 for v in self._vectors.values() if v.any())

    def __contains__(self, entity_id: object) -> bool:
        vec = self._vectors.get(entity_id)  # type: ignore[arg-type]
        return vec is not None and bool(vec.any())

    def ids(self) -> list[str]:
        return sorted(k for k, v in self._vectors.items() if v.any())

    def get(self, entity_id: str) -> np.ndarray | None:
        vec = self._vectors.get(entity_id)
        return None if vec is None or not vec.any() else vec.copy()

    def upsert(self, entity_id: str, vector: Sequence[float] | np.ndarray) -> None:
        vec = _as_vector(vector)
        if vec.shape[0] != self.dim:
            raise DimensionMismatch(f"index dimension {self.dim}, vector has {vec.shape[0]}")
        self._vectors[entity_id] = vec.copy()
        self._cache = None

    def remove(self, entity_id: str) -> None:
        if self._vectors.pop(entity_id, None) is not None:
            self._cache = None

    def _matrix(self) -> tuple[list[str], np.ndarray, np.ndarray]:
        if self._cache is None:
            ids = self.ids()
            if ids:
                mat = np.stack([self._vectors[i] for i in ids])
            else:
                mat = np.zeros((0, self.dim))
            self._cache = (ids, mat, np.linalg.norm(mat, axis=1))
        return self._cache

    def top_k(self, query: Sequence[float] | np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _as_vector(query)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"index dimension {self.dim}, query has {q.shape[0]}")
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise ZeroNorm("query vector has zero norm")
        ids, mat, norms = self._matrix()
        if not ids:
            raise EmptyIndex("no retrievable embeddings")
        # row-wise sum keeps identical rows bit-identical, so exact ties stay ties
        scores = np.clip((mat * q).sum(axis=1) / (norms * qn), -1.0, 1.0)
        # ids are ascending, so a stable sort on -score applies the tie rule
        order = np.argsort(-scores, kind="stable")[:k]
        return [(ids[i], float(scores[i])) for i in order]

    # -- sidecar file -------------------------------------------------------

    def dumps(self) -> str:
        lines = [json.dumps({"dim": self.dim})]
        for entity_id in self.ids():
            lines.append(json.dumps({"id": entity_id, "vector": self._vectors[entity_id].tolist()}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(Path(path), self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike) -> EmbeddingIndex:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read embeddings {path}: {exc}") from exc
        return cls.loads(text, source=str(path))

    @classmethod
    def loads(cls, text: str, source: str | None = None) -> EmbeddingIndex:
        lines = jsonl_lines(text)
        if not lines:
            raise MalformedRecord(1, "missing {\"dim\": D} header", source)
        try:
            header = json.loads(lines[0])
            dim = header["dim"]
            if set(header) != {"dim"} or isinstance(dim, bool) or not isinstance(dim, int):
                raise ValueError
            index = cls(dim)
        except (ValueError, KeyError, TypeError):
            raise MalformedRecord(1, "header must be {\"dim\": <positive int>}", source) from None
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or set(obj) != {"id", "vector"}:
                    raise ValueError("record must have exactly the fields id, vector")
                if not isinstance(obj["id"], str) or not isinstance(obj["vector"], list):
                    raise ValueError("id must be a string and vector a list")
                index.upsert(obj["id"], obj["vector"])
            except (ValueError, TypeError, DimensionMismatch) as exc:
                raise MalformedRecord(lineno, str(exc), source) from None
        return index

    def copy(self) -> EmbeddingIndex:
        clone = EmbeddingIndex(self.dim)
        clone._vectors = {k: v.copy() for k, v in self._vectors.items()}
        return clone

    @classmethod
    def from_items(cls, dim: int, items: Iterable[tuple[str, Sequence[float]]]) -> EmbeddingIndex:
        index = cls(dim)
        for entity_id, vec in items:
            index.upsert(entity_id, vec)
        return index
