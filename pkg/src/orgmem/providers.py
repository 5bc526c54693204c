"""Model-dependency contracts and their deterministic in-process stand-ins.

Two external dependencies exist: text embedding and structured completion.
Both are behind small interfaces so every pipeline runs offline against the
hash embedder and the scripted completer, and a remote HTTP client can be
swapped in without touching pipeline logic.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Protocol, Sequence

import numpy as np


class PromptKind(str, Enum):
    DUAL_EXTRACT = "dualExtract"
    HYPE_QUERIES = "hypeQueries"
    SCOPE_INFERENCE = "scopeInference"
    FULL_ROUTE_ANALYSIS = "fullRouteAnalysis"
    COMPLETENESS_JUDGE = "completenessJudge"
    FOLLOWUP_QUERIES = "followupQueries"
    ANSWER_SYNTHESIS = "answerSynthesis"
    SCHEMA_AUTHOR = "schemaAuthor"
    SCHEMA_ENHANCE = "schemaEnhance"
    PROPERTY_ANALYSIS = "propertyAnalysis"
    PROPERTY_OPTIMIZE = "propertyOptimize"
    RUBRIC_SCORE = "rubricScore"


# A missing script entry (or a degraded remote) resolves to the kind's
# neutral response so pipelines degrade instead of aborting.
NEUTRAL_RESPONSES: dict[PromptKind, dict[str, Any]] = {
    PromptKind.DUAL_EXTRACT: {"facts": [], "properties": []},
    PromptKind.HYPE_QUERIES: {"queries": []},
    PromptKind.SCOPE_INFERENCE: {"alwaysOn": False, "triggerKeywords": []},
    PromptKind.FULL_ROUTE_ANALYSIS: {"selections": []},
    PromptKind.COMPLETENESS_JUDGE: {"complete": True, "missing": []},
    PromptKind.FOLLOWUP_QUERIES: {"queries": []},
    PromptKind.ANSWER_SYNTHESIS: {"answer": "", "sourceIds": []},
    PromptKind.SCHEMA_AUTHOR: {"properties": []},
    PromptKind.SCHEMA_ENHANCE: {"property": None},
    PromptKind.PROPERTY_ANALYSIS: {"diagnoses": []},
    PromptKind.PROPERTY_OPTIMIZE: {"property": None},
    PromptKind.RUBRIC_SCORE: {"scores": None},
}


class ProviderFailure(RuntimeError):
    """A completion or embedding backend failed to produce a usable response."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt_kind: PromptKind
    payload: dict[str, Any]
    temperature: float = 0.0


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...

    def dimension(self) -> int: ...


class CompletionProvider(Protocol):
    def complete(self, request: CompletionRequest) -> dict[str, Any]: ...

    def model_id(self) -> str: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class HashEmbedder:
    """Feature-hashed bag-of-words embedding.

    Each token is assigned a bucket and a sign by two independent digests, so
    the vector depends only on the multiset of tokens. Deterministic across
    processes, which keeps every desk-scale experiment replayable.
    """

    def __init__(self, dim: int = 256):
        self._dim = dim

    def dimension(self) -> int:
        return self._dim

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self._dim, dtype=np.float64)
        for token in tokenize(text):
            data = token.encode("utf-8")
            bucket = int.from_bytes(
                hashlib.md5(b"bucket:" + data).digest()[:8], "big"
            ) % self._dim
            sign = 1.0 if hashlib.md5(b"sign:" + data).digest()[0] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec = np.zeros(self._dim, dtype=np.float64)
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


Matcher = Callable[[dict[str, Any]], bool]


def payload_contains(marker: str) -> Matcher:
    """Matcher true when the marker substring occurs anywhere in the payload."""

    def check(payload: dict[str, Any]) -> bool:
        return marker in json.dumps(payload, ensure_ascii=False)

    return check


@dataclass
class _ScriptEntry:
    kind: PromptKind
    matcher: Matcher | None
    response: dict[str, Any]


class ScriptedCompleter:
    """Table-driven completion provider for tests and the eval harness.

    Looks up the first entry whose kind and matcher accept the request;
    unmatched requests fall back to the kind's neutral response. Immutable
    after construction apart from the call counter.
    """

    def __init__(self, model_id: str = "scripted-v1"):
        self._entries: list[_ScriptEntry] = []
        self._model_id = model_id
        self.calls: list[CompletionRequest] = []

    def script(
        self,
        kind: PromptKind,
        response: dict[str, Any],
        matcher: Matcher | None = None,
        marker: str | None = None,
    ) -> "ScriptedCompleter":
        if marker is not None:
            matcher = payload_contains(marker)
        self._entries.append(_ScriptEntry(kind, matcher, response))
        return self

    def complete(self, request: CompletionRequest) -> dict[str, Any]:
        self.calls.append(request)
        for entry in self._entries:
            if entry.kind is not request.prompt_kind:
                continue
            if entry.matcher is None or entry.matcher(request.payload):
                return json.loads(json.dumps(entry.response))
        return json.loads(json.dumps(NEUTRAL_RESPONSES[request.prompt_kind]))

    def model_id(self) -> str:
        return self._model_id

    def call_count(self, kind: PromptKind | None = None) -> int:
        if kind is None:
            return len(self.calls)
        return sum(1 for c in self.calls if c.prompt_kind is kind)


class FailingCompleter:
    """Always raises; used to exercise degradation paths."""

    def __init__(self, model_id: str = "failing-v1"):
        self._model_id = model_id
        self.calls = 0

    def complete(self, request: CompletionRequest) -> dict[str, Any]:
        self.calls += 1
        raise ProviderFailure("completion backend unavailable")

    def model_id(self) -> str:
        return self._model_id


@dataclass
class RemoteProviderSettings:
    endpoint: str
    model: str
    api_key: str = ""
    max_retries: int = 3
    backoff_base: float = 0.5

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> "RemoteProviderSettings":
        env = env if env is not None else dict(os.environ)
        endpoint = env.get("ORGMEM_PROVIDER_ENDPOINT", "")
        if not endpoint:
            raise ProviderFailure("ORGMEM_PROVIDER_ENDPOINT is not configured")
        return cls(
            endpoint=endpoint,
            model=env.get("ORGMEM_PROVIDER_MODEL", "default"),
            api_key=env.get("ORGMEM_PROVIDER_API_KEY", ""),
        )


class RemoteCompletionProvider:
    """JSON-over-HTTP completion client with simple exponential backoff.

    The transport is injectable so the client is testable without a network;
    the default uses httpx. Request bodies are expected to be post-redaction
    when tracing is enabled upstream.
    """

    def __init__(
        self,
        settings: RemoteProviderSettings,
        transport: Callable[[str, dict[str, Any], dict[str, str]], dict[str, Any]] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._settings = settings
        self._transport = transport or self._default_transport
        self._sleep = sleep

    @staticmethod
    def _default_transport(url: str, body: dict[str, Any], headers: dict[str, str]) -> dict[str, Any]:
        import httpx

        resp = httpx.post(url, json=body, headers=headers, timeout=60.0)
        resp.raise_for_status()
        return resp.json()

    def complete(self, request: CompletionRequest) -> dict[str, Any]:
        body = {
            "promptKind": request.prompt_kind.value,
            "payload": request.payload,
            "temperature": request.temperature,
            "model": self._settings.model,
        }
        headers = {"Content-Type": "application/json"}
        if self._settings.api_key:
            headers["Authorization"] = f"Bearer {self._settings.api_key}"
        last: Exception | None = None
        for attempt in range(self._settings.max_retries):
            try:
                return self._transport(self._settings.endpoint, body, headers)
            except Exception as exc:
                last = exc
                if attempt + 1 < self._settings.max_retries:
                    self._sleep(self._settings.backoff_base * (2**attempt))
        raise ProviderFailure(f"remote completion failed after retries: {last}")

    def model_id(self) -> str:
        return self._settings.model


class CountingEmbedder:
    """Wraps an embedder and counts calls; used by call-accounting tests."""

    def __init__(self, inner: EmbeddingProvider):
        self._inner = inner
        self.calls = 0

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        self.calls += 1
        return self._inner.embed(texts)

    def dimension(self) -> int:
        return self._inner.dimension()
