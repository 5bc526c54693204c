"""Query-side retrieval: reflection loop, recency ranking, entity context.

A retrieve call embeds the query, searches the org partition, then
optionally reflects: a judge call decides whether the evidence answers
the question and, if not, follow-up queries widen the net for a bounded
number of rounds. Results merge by entry id and rank by similarity times
an exponential recency decay. A separate endpoint compiles an entity's
properties and observations into a token-budgeted text block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .core import (
    MEMORY,
    PROPERTY_VALUE,
    Clock,
    CRMKeys,
    EngineConfig,
    MemoryEntry,
    estimate_tokens,
    parse_iso,
    resolve_entity,
)
from .providers import CompletionRequest, PromptKind, ProviderFailure
from .store import MemoryStore, RetrievalFilter, _desc_instant

FOLLOWUPS_PER_ROUND = 2


class InvalidRequest(ValueError):
    pass


class EntityNotFound(LookupError):
    pass


@dataclass(frozen=True)
class RetrievalRequest:
    org_id: str
    query: str
    k: int = 10
    filter: RetrievalFilter = field(default_factory=RetrievalFilter)
    reflect: bool = False
    max_rounds: int | None = None
    recency_decay: bool = True
    synthesize: bool = False
    # Caller-designed queries searched alongside the main one; query
    # strategy tends to dominate retrieval quality, so applications that
    # know their follow-ups can skip the judge entirely.
    extra_queries: tuple[str, ...] = ()


@dataclass(frozen=True)
class RankedResult:
    entry: MemoryEntry
    final_score: float
    raw_similarity: float

    def to_json(self) -> dict[str, Any]:
        return {
            "entry": self.entry.to_json(),
            "finalScore": self.final_score,
            "rawSimilarity": self.raw_similarity,
        }


@dataclass(frozen=True)
class RetrievalResult:
    results: tuple[RankedResult, ...]
    rounds: int
    followup_queries: tuple[str, ...] = ()
    answer: dict[str, Any] | None = None
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "results": [r.to_json() for r in self.results],
            "rounds": self.rounds,
            "followupQueries": list(self.followup_queries),
            "warnings": list(self.warnings),
        }
        if self.answer is not None:
            data["answer"] = self.answer
        return data


def decay_factor(entry: MemoryEntry, config: EngineConfig, clock: Clock) -> float:
    """2^(-age/halfLife) with age in days; undated entries pay no penalty."""
    ref = entry.age_reference()
    if not ref:
        return 1.0
    try:
        then = parse_iso(ref)
    except (ValueError, TypeError):
        return 1.0
    age_days = (clock.now() - then).total_seconds() / 86400.0
    age_days = max(0.0, age_days)
    return 2.0 ** (-age_days / config.recency_half_life_days)


def rank_results(
    pairs: list[tuple[MemoryEntry, float]],
    recency_decay: bool,
    config: EngineConfig,
    clock: Clock,
) -> list[RankedResult]:
    ranked = [
        RankedResult(
            entry=entry,
            final_score=raw * (decay_factor(entry, config, clock) if recency_decay else 1.0),
            raw_similarity=raw,
        )
        for entry, raw in pairs
    ]
    ranked.sort(
        key=lambda r: (
            -round(r.final_score, 12),
            _desc_instant(r.entry.created_at),
            r.entry.id,
        )
    )
    return ranked


def _result_digest(pool: dict[str, tuple[MemoryEntry, float]]) -> list[dict[str, Any]]:
    return [
        {"id": entry.id, "text": entry.text}
        for entry, _ in sorted(pool.values(), key=lambda p: p[0].id)
    ]


def retrieve(
    req: RetrievalRequest,
    store: MemoryStore,
    embedder,
    completer=None,
    config: EngineConfig | None = None,
    clock: Clock | None = None,
) -> RetrievalResult:
    """Search, optionally reflect, rank, optionally synthesize an answer.

    Provider failures mid-reflection degrade: whatever has been gathered
    so far is ranked and returned with the round count reached.
    """
    config = config or EngineConfig()
    clock = clock or Clock()
    max_rounds = (
        config.reflection_max_rounds if req.max_rounds is None else req.max_rounds
    )
    if max_rounds > config.reflection_max_rounds:
        raise InvalidRequest(
            f"maxRounds {max_rounds} exceeds bound {config.reflection_max_rounds}"
        )
    if req.reflect and completer is None:
        raise InvalidRequest("reflect=true requires a completion provider")

    pool: dict[str, tuple[MemoryEntry, float]] = {}

    def run_search(text: str) -> None:
        vector = embedder.embed_one(text)
        for entry, sim in store.search(req.org_id, vector, req.k, req.filter):
            held = pool.get(entry.id)
            if held is None or sim > held[1]:
                pool[entry.id] = (entry, sim)

    run_search(req.query)
    for extra in req.extra_queries:
        run_search(extra)

    rounds = 1
    followups: list[str] = []
    warnings: list[str] = []
    while req.reflect and rounds - 1 < max_rounds:
        try:
            verdict = completer.complete(
                CompletionRequest(
                    PromptKind.COMPLETENESS_JUDGE,
                    {"query": req.query, "results": _result_digest(pool)},
                    temperature=config.completeness_temperature,
                )
            )
        except ProviderFailure:
            warnings.append("reflection judge failed; returning partial results")
            break
        if verdict.get("complete", True):
            break
        try:
            response = completer.complete(
                CompletionRequest(
                    PromptKind.FOLLOWUP_QUERIES,
                    {
                        "query": req.query,
                        "missing": verdict.get("missing", []),
                        "results": _result_digest(pool),
                    },
                    temperature=config.followup_temperature,
                )
            )
        except ProviderFailure:
            warnings.append("follow-up generation failed; returning partial results")
            break
        queries = [
            q
            for q in response.get("queries", [])
            if isinstance(q, str) and q.strip()
        ][:FOLLOWUPS_PER_ROUND]
        if not queries:
            break
        rounds += 1
        followups.extend(queries)
        for query in queries:
            run_search(query)

    ranked = rank_results(list(pool.values()), req.recency_decay, config, clock)
    results = tuple(ranked[: req.k])

    answer = None
    if req.synthesize and completer is not None and results:
        answer, synth_warnings = synthesize_answer(
            req.query, list(results), completer
        )
        warnings.extend(synth_warnings)

    return RetrievalResult(
        results=results,
        rounds=rounds,
        followup_queries=tuple(followups),
        answer=answer,
        warnings=tuple(warnings),
    )


def synthesize_answer(
    query: str, results: list[RankedResult], completer
) -> tuple[dict[str, Any] | None, list[str]]:
    """One completion over the ranked evidence; cited ids are validated."""
    if not results:
        raise InvalidRequest("synthesis needs at least one result")
    payload = {
        "query": query,
        "results": [
            {"id": r.entry.id, "text": r.entry.text, "score": r.final_score}
            for r in results
        ],
    }
    try:
        response = completer.complete(
            CompletionRequest(PromptKind.ANSWER_SYNTHESIS, payload)
        )
    except ProviderFailure:
        return None, ["answer synthesis failed; results returned without answer"]
    known = {r.entry.id for r in results}
    cited = response.get("sourceIds") or []
    kept, warnings = [], []
    for source_id in cited:
        if source_id in known:
            kept.append(source_id)
        else:
            warnings.append(f"synthesis cited unknown id {source_id!r}; stripped")
    return {"text": response.get("answer", ""), "sourceIds": kept}, warnings


@dataclass(frozen=True)
class EntityContext:
    text: str
    included_property_ids: tuple[str, ...]
    included_memory_ids: tuple[str, ...]
    tokens_used: int

    def to_json(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "includedPropertyIds": list(self.included_property_ids),
            "includedMemoryIds": list(self.included_memory_ids),
            "tokensUsed": self.tokens_used,
        }


def _render_confidence(value: float | None) -> str:
    if value is None:
        return ""
    return f" ({value:g})"


def entity_context(
    store: MemoryStore,
    org_id: str,
    keys: CRMKeys,
    token_budget: int,
    config: EngineConfig | None = None,
    schema=None,
) -> EntityContext:
    """Entity snapshot as a Properties-then-Observations text block.

    Properties take strict priority: no observation is admitted until the
    property section is done. Items append greedily in order until the
    next one would push the running token estimate past the budget. With
    a schema, properties follow its declaration order; otherwise they
    sort by name.
    """
    config = config or EngineConfig()
    record_id = resolve_entity(keys, store, org_id)
    if record_id is None:
        raise EntityNotFound(f"no entity for keys {keys.to_json()}")

    stored = store.entries(org_id)
    props = [
        sv.entry
        for sv in stored
        if sv.record_id == record_id and sv.entry.type == PROPERTY_VALUE
    ]
    observations = [
        sv.entry
        for sv in stored
        if sv.record_id == record_id and sv.entry.type == MEMORY
    ]

    if schema is not None:
        order = {p.id: i for i, p in enumerate(schema.properties)}
        props.sort(
            key=lambda e: (
                order.get(e.property_id, len(order)),
                e.property_name or "",
                e.created_at,
            )
        )
    else:
        props.sort(key=lambda e: (e.property_name or "", e.created_at))
    observations.sort(key=lambda e: (_desc_instant(e.age_reference() or ""), e.id))

    text = ""
    tokens_used = 0
    included_props: list[str] = []
    included_mems: list[str] = []

    def admit(piece: str) -> bool:
        nonlocal text, tokens_used
        candidate = text + piece
        cost = estimate_tokens(candidate)
        if cost > token_budget:
            return False
        text, tokens_used = candidate, cost
        return True

    budget_hit = False
    for i, entry in enumerate(props):
        line = (
            f"{entry.property_name}: {entry.property_value}"
            f"{_render_confidence(entry.confidence)}\n"
        )
        piece = ("## Properties\n" + line) if i == 0 else line
        if not admit(piece):
            budget_hit = True
            break
        included_props.append(entry.id)

    if not budget_hit:
        for i, entry in enumerate(observations):
            line = f"{entry.text}\n"
            prefix = "\n## Observations\n" if i == 0 else ""
            if text == "" and i == 0:
                prefix = "## Observations\n"
            if not admit(prefix + line):
                break
            included_mems.append(entry.id)

    return EntityContext(
        text=text,
        included_property_ids=tuple(included_props),
        included_memory_ids=tuple(included_mems),
        tokens_used=tokens_used,
    )
