"""Role-separated access to reasoning, judging, aggregation and embedding models.

Every model call goes through :class:`ModelGateway`, which routes a
:class:`CompletionRequest` to the backend configured for its role, retries
transport failures and keeps an audit log of :class:`ModelExchange` records.

Backends:

* :class:`ScriptedBackend` replays a scenario file so every control path can be
  exercised offline and byte-for-byte reproducibly.
* :class:`HashingEmbedder` / :class:`MappingEmbedder` are deterministic local
  embedders.
* :class:`ChatCompletionsBackend` talks to a chat-completions style HTTP API.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import prompts
from .errors import (
    DimensionMismatch,
    IoFailure,
    MalformedRecord,
    Misconfiguration,
    ScriptExhausted,
    TransportFailure,
    UnparsableJudgeReply,
)
from .kg_store import jsonl_lines

logger = logging.getLogger(__name__)

REASK_LIMIT = 2
JUDGE_REASK_SUFFIX = "\n\nReply with one integer from 0 to 100 only."


class ModelRole(str, Enum):
    REASONER = "reasoner"
    JUDGE = "judge"
    AGGREGATOR = "aggregator"
    EMBEDDER = "embedder"


@dataclass(frozen=True)
class CompletionRequest:
    role: ModelRole
    prompt: str
    temperature: float = 0.0
    max_output: int = 1024
    sample_count: int = 1
    # scenario step label and optional element id; used for scripting and auditing
    step: str = ""
    subject: str | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.sample_count > 1 and self.role is not ModelRole.REASONER:
            raise ValueError("only reasoner requests may ask for multiple samples")


@dataclass
class ModelExchange:
    request: CompletionRequest
    responses: list[str]
    backend_id: str
    latency: float
    attempts: int = 1


@dataclass(frozen=True)
class JudgeReply:
    score: int
    description: str | None
    attempts: int
    raw: str


@dataclass(frozen=True)
class GatewayConfig:
    reasoner_model: str = "reasoner"
    judge_model: str = "judge"
    aggregator_model: str = "aggregator"
    embedder_model: str = "embedder"
    allow_same_judge: bool = False
    judge_temperature: float = 0.0
    aggregator_temperature: float = 0.0
    max_output: int = 1024
    max_attempts: int = 3
    backoff: float = 0.5
    embedding_dim: int = 64

    def model_for(self, role: ModelRole) -> str:
        return {
            ModelRole.REASONER: self.reasoner_model,
            ModelRole.JUDGE: self.judge_model,
            ModelRole.AGGREGATOR: self.aggregator_model,
            ModelRole.EMBEDDER: self.embedder_model,
        }[role]


class TextBackend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest, model: str) -> list[str]: ...


class EmbeddingBackend(Protocol):
    backend_id: str

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]: ...


# -- reply parsing ----------------------------------------------------------

_SCORE_LABELLED = re.compile(r"score\s*[:=]?\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE)
_SCORE_BARE = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(?:/\s*100|%)?\s*\.?\s*$")
_DESCRIPTION = re.compile(r"<description>(.*?)</description>", re.IGNORECASE | re.DOTALL)


def parse_judge_score(reply: str) -> int | None:
    """Integer score from a judge reply, clamped to [0, 100]; None if absent.

    Accepts ``Score: 72`` anywhere in the reply or a reply that is just a
    number. Fractions round half-up.
    """
    m = _SCORE_LABELLED.search(reply) or _SCORE_BARE.match(reply)
    if m is None:
        return None
    value = int(Decimal(m.group(1)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return max(0, min(100, value))


def parse_description(reply: str) -> str | None:
    m = _DESCRIPTION.search(reply)
    if m is None:
        return None
    text = " ".join(m.group(1).split())
    return text or None


# -- gateway ----------------------------------------------------------------


class ModelGateway:
    """Routes requests to per-role backends with retry and an exchange log."""

    def __init__(
        self,
        backends: Mapping[ModelRole, Any],
        config: GatewayConfig | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config or GatewayConfig()
        self.backends = dict(backends)
        self.exchanges: list[ModelExchange] = []
        self._sleep = sleep
        if self.config.judge_model == self.config.reasoner_model and not self.config.allow_same_judge:
            raise Misconfiguration(
                "judge and reasoner name the same model; set gateway.allow_same_judge to override"
            )

    def _backend(self, role: ModelRole) -> Any:
        try:
            return self.backends[role]
        except KeyError:
            raise Misconfiguration(f"no backend configured for role {role.value}") from None

    def _with_retry(self, call: Callable[[], Any]) -> tuple[Any, int]:
        attempts = self.config.max_attempts
        for attempt in range(1, attempts + 1):
            try:
                return call(), attempt
            except TransportFailure as exc:
                if attempt == attempts:
                    raise
                delay = self.config.backoff * 2 ** (attempt - 1)
                logger.warning("transport failure (attempt %d/%d): %s", attempt, attempts, exc)
                self._sleep(delay)
        raise AssertionError("unreachable")

    def complete(self, request: CompletionRequest) -> list[str]:
        backend = self._backend(request.role)
        model = self.config.model_for(request.role)
        start = time.perf_counter()
        responses, attempts = self._with_retry(lambda: backend.complete(request, model))
        if len(responses) != request.sample_count:
            raise TransportFailure(
                f"backend returned {len(responses)} responses, expected {request.sample_count}"
            )
        self.exchanges.append(
            ModelExchange(request, list(responses), backend.backend_id,
                          time.perf_counter() - start, attempts)
        )
        return list(responses)

    def reasoner(self, prompt: str, *, step: str, temperature: float = 0.0,
                 samples: int = 1, subject: str | None = None) -> list[str]:
        return self.complete(CompletionRequest(
            ModelRole.REASONER, prompt, temperature, self.config.max_output, samples, step, subject,
        ))

    def judge(self, prompt: str, *, step: str = "judge", subject: str | None = None) -> JudgeReply:
        """Ask the judge, re-asking with a stricter suffix on unparsable replies."""
        text = prompt
        for attempt in range(1, REASK_LIMIT + 2):
            (reply,) = self.complete(CompletionRequest(
                ModelRole.JUDGE, text, self.config.judge_temperature, self.config.max_output,
                1, step, subject,
            ))
            score = parse_judge_score(reply)
            if score is not None:
                return JudgeReply(score, parse_description(reply), attempt, reply)
            logger.info("unparsable judge reply (attempt %d): %.80r", attempt, reply)
            text = prompt + JUDGE_REASK_SUFFIX
        raise UnparsableJudgeReply(f"no score after {REASK_LIMIT} re-asks")

    def judge_score(self, fact_context: str, *, step: str = "judge",
                    subject: str | None = None) -> int:
        prompt = prompts.render("judge", fact=fact_context)
        return self.judge(prompt, step=step, subject=subject).score

    def aggregate(self, candidates: Sequence[str], query_context: str, *,
                  step: str = "aggregate") -> str:
        if not candidates:
            raise ValueError("aggregate needs at least one candidate")
        drafts = "\n\n".join(f"--- draft {i} ---\n{c.strip()}" for i, c in enumerate(candidates, 1))
        prompt = prompts.render("aggregate", context=query_context, candidates=drafts)
        (reply,) = self.complete(CompletionRequest(
            ModelRole.AGGREGATOR, prompt, self.config.aggregator_temperature,
            self.config.max_output, 1, step,
        ))
        return reply

    def embed(self, texts: Sequence[str], *, step: str = "embed") -> list[np.ndarray]:
        backend = self._backend(ModelRole.EMBEDDER)
        model = self.config.model_for(ModelRole.EMBEDDER)
        texts = list(texts)
        start = time.perf_counter()
        vectors, attempts = self._with_retry(lambda: backend.embed(texts, model))
        if len(vectors) != len(texts):
            raise TransportFailure(f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] != self.config.embedding_dim:
                raise DimensionMismatch(
                    f"embedder returned dimension {arr.shape}, expected {self.config.embedding_dim}"
                )
            out.append(arr)
        request = CompletionRequest(ModelRole.EMBEDDER, "\n".join(texts), step=step)
        self.exchanges.append(ModelExchange(
            request, [json.dumps(v.tolist()) for v in out], backend.backend_id,
            time.perf_counter() - start, attempts,
        ))
        return out

    def calls(self, step: str | None = None, role: ModelRole | None = None,
              subject: str | None = None) -> list[ModelExchange]:
        """Filter the exchange log."""
        return [
            x for x in self.exchanges
            if (step is None or x.request.step == step)
            and (role is None or x.request.role is role)
            and (subject is None or x.request.subject == subject)
        ]


# -- scripted backend -------------------------------------------------------


class ScriptedBackend:
    """Replays canned responses keyed by (step, role), strictly in order.

    Scenario records look like ``{"step": "topics", "role": "reasoner",
    "responses": ["hypertension; beta blockers"]}``. Records sharing a key
    are concatenated into one queue. Embedder responses are JSON arrays (or
    JSON-encoded arrays) of floats, one per embedded text.
    """

    def __init__(self, records: Iterable[Mapping[str, Any]] = (), backend_id: str = "scripted") -> None:
        self.backend_id = backend_id
        self._queues: dict[tuple[str, ModelRole], deque] = {}
        for rec in records:
            self.add(rec["step"], ModelRole(rec["role"]), rec["responses"])

    def add(self, step: str, role: ModelRole | str, responses: Sequence[Any]) -> None:
        self._queues.setdefault((step, ModelRole(role)), deque()).extend(responses)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> ScriptedBackend:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read scenario {path}: {exc}") from exc
        records = []
        for lineno, line in enumerate(jsonl_lines(text), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or set(rec) != {"step", "role", "responses"}:
                    raise ValueError("record must have exactly the fields step, role, responses")
                if not isinstance(rec["step"], str) or not isinstance(rec["responses"], list):
                    raise ValueError("step must be a string and responses a list")
                ModelRole(rec["role"])
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc), str(path)) from None
            records.append(rec)
        return cls(records, backend_id=f"scripted:{Path(path).name}")

    def has_role(self, role: ModelRole) -> bool:
        return any(r is role for _, r in self._queues)

    def remaining(self) -> dict[tuple[str, str], int]:
        return {(s, r.value): len(q) for (s, r), q in self._queues.items() if q}

    def _take(self, step: str, role: ModelRole, count: int) -> list[Any]:
        queue = self._queues.get((step, role), deque())
        if len(queue) < count:
            raise ScriptExhausted(
                f"scenario has {len(queue)} {role.value} replies left for step {step!r}, "
                f"{count} requested"
            )
        return [queue.popleft() for _ in range(count)]

    def complete(self, request: CompletionRequest, model: str) -> list[str]:
        return [str(r) for r in self._take(request.step, request.role, request.sample_count)]

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        raw = self._take("embed", ModelRole.EMBEDDER, len(texts))
        return [json.loads(r) if isinstance(r, str) else list(r) for r in raw]


# -- local embedders --------------------------------------------------------


class HashingEmbedder:
    """Deterministic feature-hashing embedder (words plus character trigrams).

    Needs no model and no network; identical texts map to identical vectors,
    and texts sharing words or word fragments land close in cosine terms.
    """

    backend_id = "hashing"

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim

    def _features(self, text: str) -> list[str]:
        words = re.findall(r"[a-z0-9]+", text.lower())
        feats = [f"w:{w}" for w in words]
        for w in words:
            padded = f"<{w}>"
            feats.extend(f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2))
        return feats

    def vector(self, text: str) -> list[float]:
        vec = np.zeros(self.dim)
        for feat in self._features(text):
            digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        return (vec / norm).tolist() if norm else vec.tolist()

    def embed(self, texts: Sequence[str], model: str = "") -> list[list[float]]:
        return [self.vector(t) for t in texts]


class MappingEmbedder:
    """Looks texts up in a fixed mapping; unknown texts get the zero vector."""

    backend_id = "mapping"

    def __init__(self, mapping: Mapping[str, Sequence[float]], dim: int | None = None) -> None:
        self.mapping = {k: list(v) for k, v in mapping.items()}
        dims = {len(v) for v in self.mapping.values()}
        self.dim = dim if dim is not None else (dims.pop() if len(dims) == 1 else 0)

    def embed(self, texts: Sequence[str], model: str = "") -> list[list[float]]:
        return [self.mapping.get(t, [0.0] * self.dim) for t in texts]


# -- HTTP backend -----------------------------------------------------------


@dataclass
class ChatCompletionsBackend:
    """Chat-completions style HTTP client.

    ``POST {base_url}/chat/completions`` with body ``{"model", "messages":
    [{"role": "user", "content": prompt}], "temperature", "max_tokens"}``;
    the reply text is ``choices[0].message.content``. Multiple samples are
    issued as parallel single-sample calls and returned in sample order.
    ``POST {base_url}/embeddings`` with ``{"model", "input": [texts]}`` reads
    ``data[i].embedding`` ordered by ``data[i].index``.
    """

    base_url: str
    api_key: str
    timeout: float = 60.0
    opener: Callable[..., Any] = field(default=urllib.request.urlopen, repr=False)

    @property
    def backend_id(self) -> str:
        return f"http:{self.base_url}"

    @classmethod
    def from_env(cls, judge: bool = False) -> ChatCompletionsBackend:
        base = os.environ.get("TRAIL_API_BASE")
        key = os.environ.get("TRAIL_API_KEY")
        if judge:
            base = os.environ.get("TRAIL_JUDGE_API_BASE") or base
            key = os.environ.get("TRAIL_JUDGE_API_KEY") or key
        if not base or not key:
            prefix = "TRAIL_JUDGE_API" if judge else "TRAIL_API"
            raise Misconfiguration(f"{prefix}_BASE and {prefix}_KEY must be set for live mode")
        return cls(base, key)

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url.rstrip("/") + path
        req = urllib.request.Request(
            url,
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
            method="POST",
        )
        try:
            with self.opener(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403, 404):
                raise Misconfiguration(f"{url}: HTTP {exc.code}") from exc
            raise TransportFailure(f"{url}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise TransportFailure(f"{url}: {exc}") from exc
        try:
            return json.loads(payload)
        except ValueError as exc:
            raise TransportFailure(f"{url}: response is not JSON") from exc

    def chat_body(self, request: CompletionRequest, model: str) -> dict:
        return {
            "model": model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }

    def _one(self, request: CompletionRequest, model: str) -> str:
        data = self._post("/chat/completions", self.chat_body(request, model))
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportFailure("malformed chat completion response") from exc

    def complete(self, request: CompletionRequest, model: str) -> list[str]:
        if request.sample_count == 1:
            return [self._one(request, model)]
        with ThreadPoolExecutor(max_workers=request.sample_count) as pool:
            futures = [pool.submit(self._one, request, model) for _ in range(request.sample_count)]
            return [f.result() for f in futures]

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda d: d["index"])
            return [row["embedding"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise TransportFailure("malformed embeddings response") from exc
