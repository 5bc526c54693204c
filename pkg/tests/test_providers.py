"""Contract tests for the embedding and completion providers."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orgmem.providers import (
    NEUTRAL_RESPONSES,
    CompletionRequest,
    CountingEmbedder,
    FailingCompleter,
    HashEmbedder,
    PromptKind,
    ProviderFailure,
    RemoteCompletionProvider,
    RemoteProviderSettings,
    ScriptedCompleter,
    cosine,
    payload_contains,
    tokenize,
)


def _oracle_embed(text: str, dim: int = 256) -> list[float]:
    """Independent bag-of-words feature hash, accumulated via token counts."""
    counts = Counter(re.findall(r"[a-z0-9]+", text.lower()))
    vec = [0.0] * dim
    for token, n in counts.items():
        raw = token.encode("utf-8")
        bucket = int.from_bytes(hashlib.md5(b"bucket:" + raw).digest()[:8], "big") % dim
        sign = 1.0 if hashlib.md5(b"sign:" + raw).digest()[0] % 2 == 0 else -1.0
        vec[bucket] += sign * n
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return [x / norm for x in vec]


def _oracle_cosine(a: str, b: str) -> float:
    va, vb = _oracle_embed(a), _oracle_embed(b)
    return sum(x * y for x, y in zip(va, vb))


def test_tokenize_lowercase_alnum_runs():
    assert tokenize("Hello, World-42!") == ["hello", "world", "42"]
    assert tokenize("") == []
    assert tokenize("...") == []


def test_embed_dimension_and_unit_norm():
    emb = HashEmbedder()
    assert emb.dimension() == 256
    for text in ["alpha", "the quick brown fox", "a b c d e f g", "42"]:
        v = emb.embed([text])[0]
        assert v.shape == (256,)
        assert abs(float(np.linalg.norm(v)) - 1.0) <= 1e-6


@given(st.text(max_size=120))
def test_embed_unit_norm_property(text):
    v = HashEmbedder(64).embed_one(text)
    assert abs(float(np.linalg.norm(v)) - 1.0) <= 1e-6


def test_embed_deterministic():
    emb = HashEmbedder()
    a = emb.embed_one("customer renewal scheduled for march")
    b = emb.embed_one("customer renewal scheduled for march")
    assert np.array_equal(a, b)
    assert cosine(a, b) == pytest.approx(1.0, abs=1e-9)


def test_embed_order_invariance():
    emb = HashEmbedder()
    a = emb.embed_one("alpha beta")
    b = emb.embed_one("beta alpha")
    assert cosine(a, b) == pytest.approx(1.0, abs=1e-9)


def test_topic_cosine_ordering_matches_oracle():
    emb = HashEmbedder()
    anchor = "database migration postgres"
    near_text = "postgres database migration plan"
    far_text = "quarterly marketing budget"
    near = cosine(emb.embed_one(anchor), emb.embed_one(near_text))
    far = cosine(emb.embed_one(anchor), emb.embed_one(far_text))
    assert near == pytest.approx(_oracle_cosine(anchor, near_text), abs=1e-12)
    assert far == pytest.approx(_oracle_cosine(anchor, far_text), abs=1e-12)
    assert near > far


def test_embed_empty_text_is_basis_vector():
    emb = HashEmbedder(dim=16)
    for text in ["", "   ", "!!!"]:
        v = emb.embed_one(text)
        expected = np.zeros(16)
        expected[0] = 1.0
        assert np.array_equal(v, expected)


def test_embed_agrees_with_oracle_on_corpus():
    emb = HashEmbedder()
    corpus = [
        "renewal date pushed to q3",
        "Maria prefers email over phone",
        "repeated repeated repeated token",
        "Mixed CASE and punctuation, with 123 numbers!",
    ]
    for text in corpus:
        got = emb.embed_one(text)
        want = np.array(_oracle_embed(text))
        assert np.allclose(got, want, atol=1e-12)


def test_neutral_responses_cover_every_kind():
    assert set(NEUTRAL_RESPONSES) == set(PromptKind)


def test_scripted_neutral_default():
    comp = ScriptedCompleter()
    out = comp.complete(CompletionRequest(PromptKind.COMPLETENESS_JUDGE, {"q": "x"}))
    assert out == {"complete": True, "missing": []}


def test_scripted_marker_lookup():
    fixture = {
        "facts": ["Maria prefers email"],
        "properties": [{"propertyName": "industry", "value": "retail"}],
    }
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT, fixture, marker="FIXTURE-7"
    )
    hit = comp.complete(
        CompletionRequest(PromptKind.DUAL_EXTRACT, {"content": "note FIXTURE-7 body"})
    )
    assert hit == fixture
    miss = comp.complete(
        CompletionRequest(PromptKind.DUAL_EXTRACT, {"content": "unrelated"})
    )
    assert miss == {"facts": [], "properties": []}


def test_scripted_first_match_wins():
    comp = (
        ScriptedCompleter()
        .script(PromptKind.HYPE_QUERIES, {"queries": ["first"]}, marker="shared")
        .script(PromptKind.HYPE_QUERIES, {"queries": ["second"]}, marker="shared")
    )
    out = comp.complete(CompletionRequest(PromptKind.HYPE_QUERIES, {"text": "shared"}))
    assert out == {"queries": ["first"]}


def test_scripted_identical_requests_identical_responses():
    comp = ScriptedCompleter().script(PromptKind.ANSWER_SYNTHESIS, {"answer": "yes", "sourceIds": ["a"]})
    req = CompletionRequest(PromptKind.ANSWER_SYNTHESIS, {"question": "q"})
    assert comp.complete(req) == comp.complete(req)


def test_scripted_responses_are_copies():
    comp = ScriptedCompleter().script(PromptKind.HYPE_QUERIES, {"queries": ["a"]})
    first = comp.complete(CompletionRequest(PromptKind.HYPE_QUERIES, {}))
    first["queries"].append("mutated")
    second = comp.complete(CompletionRequest(PromptKind.HYPE_QUERIES, {}))
    assert second == {"queries": ["a"]}


def test_scripted_call_accounting():
    comp = ScriptedCompleter()
    comp.complete(CompletionRequest(PromptKind.HYPE_QUERIES, {}))
    comp.complete(CompletionRequest(PromptKind.HYPE_QUERIES, {}))
    comp.complete(CompletionRequest(PromptKind.RUBRIC_SCORE, {}))
    assert comp.call_count() == 3
    assert comp.call_count(PromptKind.HYPE_QUERIES) == 2
    assert comp.call_count(PromptKind.DUAL_EXTRACT) == 0


def test_scripted_concurrent_calls():
    comp = ScriptedCompleter().script(PromptKind.HYPE_QUERIES, {"queries": ["q"]})
    req = CompletionRequest(PromptKind.HYPE_QUERIES, {})
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(lambda _: comp.complete(req), range(64)))
    assert all(r == {"queries": ["q"]} for r in results)
    assert comp.call_count() == 64


def test_payload_contains_scans_nested_values():
    match = payload_contains("needle")
    assert match({"outer": {"inner": ["hay", "needle in here"]}})
    assert not match({"outer": "hay only"})


def test_failing_completer_raises():
    comp = FailingCompleter()
    with pytest.raises(ProviderFailure):
        comp.complete(CompletionRequest(PromptKind.DUAL_EXTRACT, {}))
    assert comp.calls == 1


def test_remote_settings_require_endpoint():
    with pytest.raises(ProviderFailure):
        RemoteProviderSettings.from_env(env={})


def test_remote_settings_from_env():
    settings = RemoteProviderSettings.from_env(
        env={
            "ORGMEM_PROVIDER_ENDPOINT": "https://models.example/v1/complete",
            "ORGMEM_PROVIDER_MODEL": "m-large",
            "ORGMEM_PROVIDER_API_KEY": "k-123",
        }
    )
    assert settings.endpoint == "https://models.example/v1/complete"
    assert settings.model == "m-large"
    assert settings.api_key == "k-123"


def test_remote_provider_posts_kind_and_payload():
    seen = {}

    def transport(url, body, headers):
        seen["url"] = url
        seen["body"] = body
        seen["headers"] = headers
        return {"queries": ["remote"]}

    provider = RemoteCompletionProvider(
        RemoteProviderSettings(endpoint="https://x/complete", model="m", api_key="k"),
        transport=transport,
    )
    out = provider.complete(
        CompletionRequest(PromptKind.HYPE_QUERIES, {"text": "t"}, temperature=0.3)
    )
    assert out == {"queries": ["remote"]}
    assert seen["url"] == "https://x/complete"
    assert seen["body"]["promptKind"] == "hypeQueries"
    assert seen["body"]["temperature"] == 0.3
    assert seen["headers"]["Authorization"] == "Bearer k"


def test_remote_provider_backoff_then_failure():
    attempts = []
    sleeps = []

    def transport(url, body, headers):
        attempts.append(1)
        raise ConnectionError("down")

    provider = RemoteCompletionProvider(
        RemoteProviderSettings(endpoint="https://x", model="m", max_retries=3, backoff_base=0.5),
        transport=transport,
        sleep=sleeps.append,
    )
    with pytest.raises(ProviderFailure):
        provider.complete(CompletionRequest(PromptKind.DUAL_EXTRACT, {}))
    assert len(attempts) == 3
    assert sleeps == [0.5, 1.0]


def test_remote_provider_recovers_after_transient_error():
    state = {"n": 0}

    def transport(url, body, headers):
        state["n"] += 1
        if state["n"] == 1:
            raise ConnectionError("transient")
        return {"facts": [], "properties": []}

    provider = RemoteCompletionProvider(
        RemoteProviderSettings(endpoint="https://x", model="m"),
        transport=transport,
        sleep=lambda _: None,
    )
    out = provider.complete(CompletionRequest(PromptKind.DUAL_EXTRACT, {}))
    assert out == {"facts": [], "properties": []}
    assert state["n"] == 2


@pytest.mark.parametrize(
    "provider",
    [
        ScriptedCompleter(),
        RemoteCompletionProvider(
            RemoteProviderSettings(endpoint="https://x", model="m"),
            transport=lambda url, body, headers: dict(NEUTRAL_RESPONSES[PromptKind(body["promptKind"])]),
        ),
    ],
    ids=["scripted", "remote"],
)
def test_completion_contract_conformance(provider):
    """Both implementations honor the same interface and response shapes."""
    assert isinstance(provider.model_id(), str)
    for kind in PromptKind:
        out = provider.complete(CompletionRequest(kind, {"probe": True}))
        assert isinstance(out, dict)
        assert out == NEUTRAL_RESPONSES[kind]


def test_counting_embedder_counts_batches():
    inner = HashEmbedder(dim=8)
    counting = CountingEmbedder(inner)
    counting.embed(["a"])
    counting.embed(["b", "c"])
    assert counting.calls == 2
    assert counting.dimension() == 8
