"""Ingestion pipeline: redact, chunk, select, extract, dedup, gate, store.

One pass over raw content produces two parallel outputs: open-set atomic
facts and schema-typed property values. Redaction runs before extraction
and again over extracted texts, chunks are mode-aware with overlap,
cross-chunk duplicates collapse before the write stage, and every write
is checked against the store's existing entries so repeated ingestion of
overlapping sources does not multiply memories.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from .core import (
    MEMORY,
    PROPERTY_VALUE,
    Clock,
    CRMKeys,
    EngineConfig,
    MemoryEntry,
    content_hash,
    deterministic_id,
    resolve_entity,
)
from .providers import (
    CompletionProvider,
    CompletionRequest,
    EmbeddingProvider,
    PromptKind,
    ProviderFailure,
    cosine,
)
from .redaction import RedactionConfig, RedactionAudit, redact
from .schema import (
    Schema,
    SchemaProperty,
    UPDATE_ACCUMULATE,
    validate_value,
)
from .store import MemoryStore

logger = logging.getLogger(__name__)


class EmptyContent(ValueError):
    pass


class PipelineFailed(RuntimeError):
    pass


MODE_DOCUMENT = "document"
MODE_TRANSCRIPT = "transcript"
MODE_DIALOGUE = "dialogue"

# (max chars per chunk, overlap chars) per content mode.
CHUNK_PARAMS = {
    MODE_DOCUMENT: (2000, 200),
    MODE_TRANSCRIPT: (1500, 300),
    MODE_DIALOGUE: (1200, 240),
}

_SPEAKER_RE = re.compile(r"^[A-Za-z][\w .'\-]{0,30}:\s")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Chunk:
    text: str
    index: int
    total: int
    mode: str
    start: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.index < self.total:
            raise ValueError(f"chunk index {self.index} outside [0, {self.total})")


@dataclass(frozen=True)
class ExtractedFact:
    text: str
    chunk_index: int = 0
    keywords: tuple[str, ...] = ()
    persons: tuple[str, ...] = ()
    entities: tuple[str, ...] = ()
    location: str | None = None
    topic: str | None = None
    timestamp: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("fact text must be non-empty")


@dataclass(frozen=True)
class ExtractedProperty:
    property_id: str
    property_name: str
    system_name: str
    value: Any
    rendered: str
    confidence: float
    update_mode: str
    chunk_index: int = 0
    collection_id: str | None = None


@dataclass
class QualityGateReport:
    coreference_score: float = 1.0
    self_containment_score: float = 1.0
    temporal_anchoring_score: float = 1.0
    flagged: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "coreferenceScore": self.coreference_score,
            "selfContainmentScore": self.self_containment_score,
            "temporalAnchoringScore": self.temporal_anchoring_score,
            "flaggedFactIndices": {
                "coreference": self.flagged.get("coreference", []),
                "selfContainment": self.flagged.get("selfContainment", []),
                "temporalAnchoring": self.flagged.get("temporalAnchoring", []),
            },
        }


# -- chunking ---------------------------------------------------------------


def _units(content: str, mode: str) -> list[tuple[int, str]]:
    """Splits content into indivisible units with their start offsets.

    Documents split after sentence enders; transcripts and dialogues split
    at speaker-turn starts so no chunk boundary lands inside a turn.
    Concatenating the units always reproduces the source exactly.
    """
    if mode == MODE_DOCUMENT:
        units: list[tuple[int, str]] = []
        pos = 0
        for m in _SENTENCE_END_RE.finditer(content):
            units.append((pos, content[pos : m.end()]))
            pos = m.end()
        if pos < len(content):
            units.append((pos, content[pos:]))
        return units or [(0, content)]

    lines = content.splitlines(keepends=True)
    units = []
    pos = 0
    current_start: int | None = None
    current: list[str] = []
    for line in lines:
        if _SPEAKER_RE.match(line) and current:
            units.append((current_start, "".join(current)))
            current_start, current = None, []
        if current_start is None:
            current_start = pos
        current.append(line)
        pos += len(line)
    if current:
        units.append((current_start, "".join(current)))
    return units or [(0, content)]


def infer_mode(content: str) -> str:
    lines = [ln for ln in content.splitlines() if ln.strip()]
    if not lines:
        return MODE_DOCUMENT
    turns = [ln for ln in lines if _SPEAKER_RE.match(ln)]
    if len(turns) / len(lines) < 0.5:
        return MODE_DOCUMENT
    speakers = [ln.split(":", 1)[0] for ln in turns]
    alternating = sum(1 for a, b in zip(speakers, speakers[1:]) if a != b)
    mean_len = sum(len(t) for t in turns) / len(turns)
    if (
        len(turns) >= 2
        and mean_len <= 120
        and alternating >= max(1, (len(speakers) - 1) // 2)
    ):
        return MODE_DIALOGUE
    return MODE_TRANSCRIPT


def chunk(content: str, mode: str | None = None) -> list[Chunk]:
    """Mode-aware chunking with character overlap at unit boundaries."""
    if not content or not content.strip():
        raise EmptyContent("cannot chunk empty content")
    mode = mode or infer_mode(content)
    if mode not in CHUNK_PARAMS:
        raise ValueError(f"unknown chunk mode {mode!r}")
    max_chars, overlap = CHUNK_PARAMS[mode]

    if len(content) <= max_chars:
        return [Chunk(text=content, index=0, total=1, mode=mode, start=0)]

    units = _units(content, mode)
    # Hard-split any unit longer than a whole chunk; unavoidable, and the
    # offset bookkeeping keeps reconstruction exact.
    flat: list[tuple[int, str]] = []
    for start, text in units:
        while len(text) > max_chars:
            flat.append((start, text[:max_chars]))
            start += max_chars
            text = text[max_chars:]
        flat.append((start, text))
    units = flat

    spans: list[tuple[int, int]] = []
    i = 0
    while i < len(units):
        start = units[i][0]
        j = i
        end = units[i][0] + len(units[i][1])
        while j + 1 < len(units) and (units[j + 1][0] + len(units[j + 1][1])) - start <= max_chars:
            j += 1
            end = units[j][0] + len(units[j][1])
        spans.append((start, end))
        if j + 1 >= len(units):
            break
        # Overlap: restart at the first unit beginning within `overlap`
        # chars of this chunk's end, never before progress is guaranteed.
        target = end - overlap
        nxt = j + 1
        for u in range(i + 1, j + 1):
            if units[u][0] >= target:
                nxt = u
                break
        i = nxt

    total = len(spans)
    return [
        Chunk(text=content[s:e], index=idx, total=total, mode=mode, start=s)
        for idx, (s, e) in enumerate(spans)
    ]


def reconstruct(chunks: Sequence[Chunk]) -> str:
    """Inverse of chunk(): drops overlaps using the recorded offsets."""
    out: list[str] = []
    covered = 0
    for c in sorted(chunks, key=lambda c: c.start):
        if c.start + len(c.text) <= covered:
            continue
        skip = max(0, covered - c.start)
        out.append(c.text[skip:])
        covered = c.start + len(c.text)
    return "".join(out)


# -- property selection -----------------------------------------------------


def select_properties(
    content: str,
    schema: Schema | None,
    embedder: EmbeddingProvider,
    min_score: float = 0.35,
    max_count: int = 25,
) -> list[SchemaProperty]:
    """Relevance-gated subset of schema properties for one extraction call.

    Scored by cosine between the content embedding and each property's
    metadata embedding; ordered by score descending then declaration order.
    """
    if schema is None or not schema.properties:
        return []
    texts = [content] + [p.metadata_text() for p in schema.properties]
    vectors = embedder.embed(texts)
    content_vec = vectors[0]
    scored = []
    for order, (prop, vec) in enumerate(zip(schema.properties, vectors[1:])):
        score = cosine(content_vec, vec)
        if score >= min_score:
            scored.append((-score, order, prop))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [prop for _, _, prop in scored[:max_count]]


# -- dual extraction --------------------------------------------------------


def dual_extract(
    chunk_: Chunk,
    properties: Sequence[SchemaProperty],
    completer: CompletionProvider,
) -> tuple[list[ExtractedFact], list[ExtractedProperty], list[str]]:
    """One completion per chunk yielding facts and typed property values.

    Property values failing type validation are dropped and reported, never
    silently coerced (lenient numeric parsing excepted).
    """
    response = completer.complete(
        CompletionRequest(
            PromptKind.DUAL_EXTRACT,
            {
                "content": chunk_.text,
                "chunkIndex": chunk_.index,
                "chunkTotal": chunk_.total,
                "properties": [p.to_json() for p in properties],
            },
        )
    )
    facts: list[ExtractedFact] = []
    for raw in response.get("facts") or []:
        if isinstance(raw, str):
            raw = {"text": raw}
        text = (raw.get("text") or "").strip()
        if not text:
            continue
        facts.append(
            ExtractedFact(
                text=text,
                chunk_index=chunk_.index,
                keywords=tuple(raw.get("keywords") or ()),
                persons=tuple(raw.get("persons") or ()),
                entities=tuple(raw.get("entities") or ()),
                location=raw.get("location"),
                topic=raw.get("topic"),
                timestamp=raw.get("timestamp"),
            )
        )

    by_system = {p.system_name: p for p in properties}
    by_id = {p.id: p for p in properties}
    props: list[ExtractedProperty] = []
    failures: list[str] = []
    for raw in response.get("properties") or []:
        key = raw.get("systemName") or raw.get("propertyId") or "?"
        prop = by_system.get(raw.get("systemName", "")) or by_id.get(raw.get("propertyId", ""))
        if prop is None:
            failures.append(f"{key}: not among selected properties")
            continue
        confidence = raw.get("confidence", 1.0)
        if not isinstance(confidence, (int, float)) or not 0.0 <= float(confidence) <= 1.0:
            failures.append(f"{prop.system_name}: confidence {confidence!r} outside [0, 1]")
            continue
        ok, rendered, reason = validate_value(prop, raw.get("value"))
        if not ok:
            failures.append(f"{prop.system_name}: {reason}")
            logger.warning("dropping property value for %s: %s", prop.system_name, reason)
            continue
        props.append(
            ExtractedProperty(
                property_id=prop.id,
                property_name=prop.name,
                system_name=prop.system_name,
                value=raw.get("value"),
                rendered=rendered,
                confidence=float(confidence),
                update_mode=prop.update_mode,
                chunk_index=chunk_.index,
                collection_id=prop.collection_id,
            )
        )
    return facts, props, failures


# -- cross-chunk dedup ------------------------------------------------------


def normalize_fact_text(text: str) -> str:
    collapsed = re.sub(r"\s+", " ", text).strip()
    return collapsed.lower().rstrip(".!?,;:")


def cross_chunk_dedup(
    facts: Sequence[ExtractedFact],
    props: Sequence[ExtractedProperty],
) -> tuple[list[ExtractedFact], list[ExtractedProperty]]:
    """Collapses duplicates introduced by chunk overlap.

    Facts dedup on normalized text, first occurrence kept. Replace-mode
    properties keep the highest-confidence value (ties: latest chunk);
    accumulate-mode properties keep every distinct value, dropping only
    exact repeats of the same value.
    """
    seen: set[str] = set()
    kept_facts: list[ExtractedFact] = []
    for fact in facts:
        key = normalize_fact_text(fact.text)
        if key in seen:
            continue
        seen.add(key)
        kept_facts.append(fact)

    best: dict[str, ExtractedProperty] = {}
    accumulate_seen: set[tuple[str, str]] = set()
    order: list[tuple[str, str]] = []
    accumulated: dict[tuple[str, str], ExtractedProperty] = {}
    for prop in props:
        if prop.update_mode == UPDATE_ACCUMULATE:
            key = (prop.property_id, prop.rendered)
            if key in accumulate_seen:
                continue
            accumulate_seen.add(key)
            accumulated[key] = prop
            order.append(key)
            continue
        current = best.get(prop.property_id)
        if (
            current is None
            or prop.confidence > current.confidence
            or (prop.confidence == current.confidence and prop.chunk_index > current.chunk_index)
        ):
            if current is None:
                order.append((prop.property_id, ""))
            best[prop.property_id] = prop

    kept_props: list[ExtractedProperty] = []
    for pid, rendered in order:
        if rendered:
            kept_props.append(accumulated[(pid, rendered)])
        else:
            kept_props.append(best[pid])
    return kept_facts, kept_props


# -- quality gates ----------------------------------------------------------

PRONOUNS = {
    "he", "she", "they", "him", "her", "them",
    "his", "hers", "their", "theirs", "it", "its",
}
VAGUE_OPENERS = {
    "this", "that", "these", "those", "also",
    "additionally", "however", "and", "but", "so",
}
RELATIVE_TIME = (
    "last week", "last month", "next week", "next month", "next quarter",
    "yesterday", "today", "tomorrow", "recently", "soon",
)
_MONTHS = (
    "january", "february", "march", "april", "may", "june", "july",
    "august", "september", "october", "november", "december",
)
_YEAR_RE = re.compile(r"\b\d{4}\b")
_MONTH_DAY_RE = re.compile(r"\b(" + "|".join(_MONTHS) + r")\s+\d{1,2}\b", re.IGNORECASE)
_WORD_RE = re.compile(r"[a-z']+", re.IGNORECASE)


def _has_absolute_date(text: str) -> bool:
    return bool(_YEAR_RE.search(text)) or bool(_MONTH_DAY_RE.search(text))


def quality_gates(facts: Sequence[ExtractedFact]) -> QualityGateReport:
    """Pattern-based early-warning gates over one extraction batch.

    Report-only by default; scores are 1 - flagged/total per gate and 1.0
    for an empty batch.
    """
    if not facts:
        return QualityGateReport(flagged={"coreference": [], "selfContainment": [], "temporalAnchoring": []})

    coref: list[int] = []
    contained: list[int] = []
    temporal: list[int] = []
    for i, fact in enumerate(facts):
        words = [w.lower() for w in _WORD_RE.findall(fact.text)]
        if any(w in PRONOUNS for w in words):
            coref.append(i)
        opener_flagged = bool(words) and words[0] in VAGUE_OPENERS
        has_name = any(tok[:1].isupper() for tok in fact.text.split())
        if opener_flagged or not has_name:
            contained.append(i)
        lowered = fact.text.lower()
        if any(tok in lowered for tok in RELATIVE_TIME) and not _has_absolute_date(fact.text):
            temporal.append(i)

    n = len(facts)
    return QualityGateReport(
        coreference_score=1.0 - len(coref) / n,
        self_containment_score=1.0 - len(contained) / n,
        temporal_anchoring_score=1.0 - len(temporal) / n,
        flagged={
            "coreference": coref,
            "selfContainment": contained,
            "temporalAnchoring": temporal,
        },
    )


# -- full pipeline ----------------------------------------------------------


@dataclass
class PipelineOptions:
    mode: str | None = None
    drop_gated_facts: bool = False
    redaction: RedactionConfig | None = None
    source: str = "api"


@dataclass
class PipelineReport:
    org_id: str
    content_hash: str
    stored_facts: int = 0
    stored_props: int = 0
    skipped_duplicates: int = 0
    stored_ids: list[str] = field(default_factory=list)
    skipped_ids: list[str] = field(default_factory=list)
    gate_report: QualityGateReport = field(default_factory=QualityGateReport)
    audits: list[RedactionAudit] = field(default_factory=list)
    validation_failures: list[str] = field(default_factory=list)
    failed_chunks: list[int] = field(default_factory=list)
    chunk_count: int = 0
    record_id: str | None = None
    redaction_applied: bool = False
    dropped_by_gates: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "orgId": self.org_id,
            "contentHash": self.content_hash,
            "storedFacts": self.stored_facts,
            "storedProps": self.stored_props,
            "skippedDuplicates": self.skipped_duplicates,
            "storedIds": self.stored_ids,
            "skippedIds": self.skipped_ids,
            "gateReport": self.gate_report.to_json(),
            "audits": [
                {
                    "tier": a.tier,
                    "entityType": a.entity_type,
                    "count": a.count,
                    "warning": a.warning,
                }
                for a in self.audits
            ],
            "validationFailures": self.validation_failures,
            "failedChunks": self.failed_chunks,
            "chunkCount": self.chunk_count,
            "recordId": self.record_id,
            "redactionApplied": self.redaction_applied,
            "droppedByGates": self.dropped_by_gates,
        }


def memorize(
    content: str,
    org_id: str,
    store: MemoryStore,
    embedder: EmbeddingProvider,
    completer: CompletionProvider,
    config: EngineConfig,
    crm_keys: CRMKeys | None = None,
    schema: Schema | None = None,
    clock: Clock | None = None,
    options: PipelineOptions | None = None,
    model_id: str | None = None,
) -> PipelineReport:
    """Runs the full ingestion pipeline and writes the surviving candidates.

    Write-side dedup scope is the resolved entity when CRM keys resolve,
    otherwise the whole org partition, and duplicates are only ever checked
    within the same entry type class.
    """
    if not org_id:
        raise ValueError("orgId must be non-empty")
    if not content or not content.strip():
        raise EmptyContent("content must be non-empty")
    options = options or PipelineOptions()
    clock = clock or Clock()
    now = clock.now_iso()
    source_hash = content_hash(content)

    clean, audits = redact(content, options.redaction)

    chunks = chunk(clean, options.mode)
    selected = select_properties(
        clean,
        schema,
        embedder,
        min_score=config.property_select_min_score,
        max_count=config.property_select_max_count,
    )

    all_facts: list[ExtractedFact] = []
    all_props: list[ExtractedProperty] = []
    failures: list[str] = []
    failed_chunks: list[int] = []
    for c in chunks:
        try:
            facts, props, bad = dual_extract(c, selected, completer)
        except ProviderFailure as exc:
            logger.warning("chunk %d extraction failed: %s", c.index, exc)
            failed_chunks.append(c.index)
            continue
        all_facts.extend(facts)
        all_props.extend(props)
        failures.extend(bad)
    if chunks and len(failed_chunks) == len(chunks):
        raise PipelineFailed(f"extraction failed on all {len(chunks)} chunks")

    # Phase 2: extracted texts pass through redaction again so model output
    # can never reintroduce what phase 1 removed.
    redaction_applied = any(a.count > 0 for a in audits)
    cleaned_facts: list[ExtractedFact] = []
    for fact in all_facts:
        cleaned, fact_audits = redact(fact.text, options.redaction)
        audits.extend(a for a in fact_audits if a.count > 0 or a.warning)
        redaction_applied = redaction_applied or any(a.count > 0 for a in fact_audits)
        if cleaned.strip():
            cleaned_facts.append(
                ExtractedFact(
                    text=cleaned,
                    chunk_index=fact.chunk_index,
                    keywords=fact.keywords,
                    persons=fact.persons,
                    entities=fact.entities,
                    location=fact.location,
                    topic=fact.topic,
                    timestamp=fact.timestamp,
                )
            )
    cleaned_props: list[ExtractedProperty] = []
    for prop in all_props:
        cleaned, prop_audits = redact(prop.rendered, options.redaction)
        audits.extend(a for a in prop_audits if a.count > 0 or a.warning)
        redaction_applied = redaction_applied or any(a.count > 0 for a in prop_audits)
        cleaned_props.append(
            ExtractedProperty(
                property_id=prop.property_id,
                property_name=prop.property_name,
                system_name=prop.system_name,
                value=prop.value,
                rendered=cleaned,
                confidence=prop.confidence,
                update_mode=prop.update_mode,
                chunk_index=prop.chunk_index,
                collection_id=prop.collection_id,
            )
        )

    facts, props = cross_chunk_dedup(cleaned_facts, cleaned_props)
    gate_report = quality_gates(facts)
    dropped = 0
    if options.drop_gated_facts:
        flagged = set()
        for indices in gate_report.flagged.values():
            flagged.update(indices)
        kept = [f for i, f in enumerate(facts) if i not in flagged]
        dropped = len(facts) - len(kept)
        facts = kept

    record_id: str | None = None
    if crm_keys is not None and not crm_keys.is_empty():
        if crm_keys.record_id and crm_keys.record_id not in store.entity_registry(org_id):
            store.register_entity(org_id, crm_keys)
        record_id = resolve_entity(crm_keys, store, org_id)

    report = PipelineReport(
        org_id=org_id,
        content_hash=source_hash,
        gate_report=gate_report,
        audits=audits,
        validation_failures=failures,
        failed_chunks=failed_chunks,
        chunk_count=len(chunks),
        record_id=record_id,
        redaction_applied=redaction_applied,
        dropped_by_gates=dropped,
    )

    total_chunks = len(chunks)
    lineage = model_id or getattr(completer, "model_id", lambda: "unknown")()

    def _provenance(chunk_index: int) -> dict[str, Any]:
        return {
            "contentHash": source_hash,
            "chunkIndex": chunk_index,
            "chunkTotal": total_chunks,
            "extractionMethod": "dual_extract",
            "llmModel": lineage,
            "redactionApplied": redaction_applied,
        }

    fact_texts = [f.text for f in facts]
    prop_texts = [f"{p.property_name}: {p.rendered}" for p in props]
    vectors = embedder.embed(fact_texts + prop_texts) if (fact_texts or prop_texts) else []

    scope = record_id
    for fact, vector in zip(facts, vectors):
        duplicate = store.nearest_above(
            org_id,
            vector,
            config.write_dedup_threshold,
            scope=scope,
            memory_type=MEMORY,
        )
        if duplicate is not None:
            report.skipped_duplicates += 1
            report.skipped_ids.append(duplicate[0])
            continue
        entry = MemoryEntry(
            id=deterministic_id(org_id, scope or "", normalize_fact_text(fact.text)),
            text=fact.text,
            org_id=org_id,
            type=MEMORY,
            record_id=scope,
            keywords=fact.keywords,
            persons=fact.persons,
            entities=fact.entities,
            location=fact.location,
            topic=fact.topic,
            timestamp=fact.timestamp,
            source=options.source,
            created_at=now,
            updated_at=now,
            provenance=_provenance(fact.chunk_index),
        )
        store.upsert(entry, vector)
        report.stored_facts += 1
        report.stored_ids.append(entry.id)

    for prop, vector in zip(props, vectors[len(facts):]):
        duplicate = store.nearest_above(
            org_id,
            vector,
            config.write_dedup_threshold,
            scope=scope,
            memory_type=PROPERTY_VALUE,
        )
        if duplicate is not None:
            report.skipped_duplicates += 1
            report.skipped_ids.append(duplicate[0])
            continue
        if prop.update_mode == UPDATE_ACCUMULATE:
            entry_id = deterministic_id(
                org_id, scope or "", prop.property_id, prop.rendered, prefix="pv"
            )
        else:
            # Replace mode: the id is keyed on the property alone so a new
            # value overwrites the old one in place.
            entry_id = deterministic_id(org_id, scope or "", prop.property_id, prefix="pv")
        entry = MemoryEntry(
            id=entry_id,
            text=f"{prop.property_name}: {prop.rendered}",
            org_id=org_id,
            type=PROPERTY_VALUE,
            record_id=scope,
            source=options.source,
            created_at=now,
            updated_at=now,
            property_id=prop.property_id,
            property_name=prop.property_name,
            system_name=prop.system_name,
            property_value=prop.rendered,
            collection_id=prop.collection_id,
            confidence=prop.confidence,
            provenance=_provenance(prop.chunk_index),
        )
        store.upsert(entry, vector)
        report.stored_props += 1
        report.stored_ids.append(entry.id)

    return report
