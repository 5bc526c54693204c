"""Tests for the ingestion pipeline stages and the full memorize flow."""

from __future__ import annotations

import re
from dataclasses import replace

import pytest

from orgmem.core import CRMKeys, EngineConfig, ManualClock, content_hash
from orgmem.extraction import (
    Chunk,
    EmptyContent,
    ExtractedFact,
    ExtractedProperty,
    PipelineFailed,
    PipelineOptions,
    chunk,
    cross_chunk_dedup,
    dual_extract,
    infer_mode,
    memorize,
    normalize_fact_text,
    quality_gates,
    reconstruct,
    select_properties,
)
from orgmem.providers import (
    CompletionRequest,
    FailingCompleter,
    HashEmbedder,
    PromptKind,
    ProviderFailure,
    ScriptedCompleter,
    cosine,
)
from orgmem.redaction import DEFAULT_PATTERNS
from orgmem.schema import Schema, SchemaProperty
from orgmem.store import MemoryStore

EMB = HashEmbedder()
CONFIG = EngineConfig()
CLOCK = ManualClock("2026-02-01T12:00:00+00:00")


def _store():
    return MemoryStore(dim=256, embedder=EMB)


def _schema(*props):
    return Schema(id="s-1", name="test", org_id="acme", properties=tuple(props))


def _prop(system_name, type="text", **kw):
    return SchemaProperty(
        id=kw.pop("id", f"p-{system_name}"),
        name=kw.pop("name", system_name.replace("_", " ").title()),
        system_name=system_name,
        type=type,
        **kw,
    )


# -- chunking ---------------------------------------------------------------


def test_short_document_single_chunk():
    content = "A" * 500
    chunks = chunk(content, mode="document")
    assert len(chunks) == 1
    assert chunks[0].index == 0
    assert chunks[0].total == 1
    assert chunks[0].text == content


def test_long_document_reconstructs():
    sentences = [f"Sentence number {i} talks about subject {i % 7}." for i in range(120)]
    content = " ".join(sentences)
    assert len(content) > 3500
    chunks = chunk(content, mode="document")
    assert len(chunks) > 1
    assert all(len(c.text) <= 2000 for c in chunks)
    assert reconstruct(chunks) == content


def test_document_chunks_start_at_sentence_boundaries():
    content = " ".join(f"Fact {i} is recorded here for posterity." for i in range(120))
    starts = {0} | {m.end() for m in re.finditer(r"(?<=[.!?])\s+", content)}
    for c in chunk(content, mode="document"):
        assert c.start in starts


def test_document_chunks_overlap():
    content = " ".join(f"Sentence {i} fills out the running text." for i in range(100))
    chunks = chunk(content, mode="document")
    for a, b in zip(chunks, chunks[1:]):
        assert b.start < a.start + len(a.text)


def test_transcript_never_splits_inside_turn():
    turns = []
    for i in range(40):
        speaker = "Alice" if i % 2 == 0 else "Bob"
        turns.append(f"{speaker}: {'word ' * 18}segment {i} ends here.")
    content = "\n".join(turns)
    assert len(content) > 3000
    # Turn-offset oracle: a chunk may only begin where a turn begins.
    turn_starts = {0}
    pos = 0
    for line in content.splitlines(keepends=True):
        turn_starts.add(pos)
        pos += len(line)
    chunks = chunk(content, mode="transcript")
    assert len(chunks) > 1
    assert all(len(c.text) <= 1500 for c in chunks)
    for c in chunks:
        assert c.start in turn_starts
    assert reconstruct(chunks) == content


def test_dialogue_reconstructs():
    lines = []
    for i in range(120):
        who = "Sam" if i % 2 == 0 else "Ava"
        lines.append(f"{who}: quick message {i}")
    content = "\n".join(lines)
    chunks = chunk(content, mode="dialogue")
    assert all(len(c.text) <= 1200 for c in chunks)
    assert reconstruct(chunks) == content


def test_mode_inference():
    assert infer_mode("Plain prose without any speakers. More prose.") == "document"
    transcript = "\n".join(
        f"Speaker {i % 3}: {'detailed remarks ' * 15}on item {i}" for i in range(10)
    )
    assert infer_mode(transcript) == "transcript"
    dialogue = "\n".join(
        ("Ann: ok" if i % 2 == 0 else "Ben: sure thing") for i in range(10)
    )
    assert infer_mode(dialogue) == "dialogue"


def test_chunk_empty_content_rejected():
    with pytest.raises(EmptyContent):
        chunk("   ")
    with pytest.raises(EmptyContent):
        chunk("")


def test_chunk_unknown_mode_rejected():
    with pytest.raises(ValueError):
        chunk("text", mode="poem")


def test_chunk_index_bounds():
    with pytest.raises(ValueError):
        Chunk(text="x", index=2, total=2, mode="document")


def test_oversized_single_unit_hard_split():
    content = "x" * 5000
    chunks = chunk(content, mode="document")
    assert all(len(c.text) <= 2000 for c in chunks)
    assert reconstruct(chunks) == content


# -- property selection -----------------------------------------------------


def test_select_identical_metadata_always_selected():
    prop = _prop("deal_notes", description="renewal pricing discussion")
    content = prop.metadata_text()
    assert select_properties(content, _schema(prop), EMB) == [prop]


def test_select_caps_at_max_count():
    props = [
        _prop(f"field_{i:03d}", description="shared context words here")
        for i in range(200)
    ]
    selected = select_properties(
        "shared context words here", _schema(*props), EMB, min_score=0.0
    )
    assert len(selected) == 25


def test_select_ranks_keyword_overlap_higher():
    p = _prop("tech_stack", description="python django aws postgres infrastructure")
    q = _prop("mailing_address", description="street city postal region")
    content = "they run python django on aws with postgres"
    ranked = select_properties(content, _schema(p, q), EMB, min_score=0.0)
    assert ranked[0] == p
    score_p = cosine(EMB.embed_one(content), EMB.embed_one(p.metadata_text()))
    score_q = cosine(EMB.embed_one(content), EMB.embed_one(q.metadata_text()))
    assert score_p > score_q


def test_select_min_score_filters():
    p = _prop("colors", description="azure crimson chartreuse")
    out = select_properties("quarterly revenue and churn", _schema(p), EMB)
    assert out == []


def test_select_empty_schema():
    assert select_properties("anything", None, EMB) == []
    assert select_properties("anything", _schema(), EMB) == []


# -- dual extraction --------------------------------------------------------


def _extract_chunk(text="Customer call notes FIXTURE-7", index=0, total=1):
    return Chunk(text=text, index=index, total=total, mode="document")


def test_dual_extract_passthrough():
    props = [
        _prop("industry", type="options", options=("retail", "fintech")),
        _prop("deal_value", type="number"),
    ]
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {
            "facts": [
                "Acme renewed for 24 months",
                {"text": "Maria prefers email", "persons": ["Maria"], "topic": "contact"},
                "Acme headquarters moved to Lisbon",
            ],
            "properties": [
                {"systemName": "industry", "value": "retail", "confidence": 0.9},
                {"systemName": "deal_value", "value": "$450,000", "confidence": 0.8},
            ],
        },
        marker="FIXTURE-7",
    )
    facts, extracted, failures = dual_extract(_extract_chunk(), props, comp)
    assert [f.text for f in facts] == [
        "Acme renewed for 24 months",
        "Maria prefers email",
        "Acme headquarters moved to Lisbon",
    ]
    assert facts[1].persons == ("Maria",)
    assert failures == []
    assert len(extracted) == 2
    assert extracted[0].rendered == "retail"
    assert extracted[1].rendered == "450000"
    assert extracted[1].value == "$450,000"


def test_dual_extract_drops_non_numeric():
    props = [_prop("deal_value", type="number")]
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {"facts": [], "properties": [{"systemName": "deal_value", "value": "not a number"}]},
    )
    _, extracted, failures = dual_extract(_extract_chunk(), props, comp)
    assert extracted == []
    assert len(failures) == 1
    assert "deal_value" in failures[0]


def test_dual_extract_drops_undeclared_option():
    props = [_prop("industry", type="options", options=("retail",))]
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {"facts": [], "properties": [{"systemName": "industry", "value": "aerospace"}]},
    )
    _, extracted, failures = dual_extract(_extract_chunk(), props, comp)
    assert extracted == []
    assert len(failures) == 1


def test_dual_extract_drops_unknown_property_and_bad_confidence():
    props = [_prop("industry", type="options", options=("retail",))]
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {
            "facts": [],
            "properties": [
                {"systemName": "nonexistent", "value": "x"},
                {"systemName": "industry", "value": "retail", "confidence": 1.4},
            ],
        },
    )
    _, extracted, failures = dual_extract(_extract_chunk(), props, comp)
    assert extracted == []
    assert len(failures) == 2


def test_dual_extract_boolean_and_date_strict():
    props = [_prop("active", type="boolean"), _prop("renewal_date", type="date")]
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {
            "facts": [],
            "properties": [
                {"systemName": "active", "value": "yes"},
                {"systemName": "renewal_date", "value": "2026-03-01"},
            ],
        },
    )
    _, extracted, failures = dual_extract(_extract_chunk(), props, comp)
    assert [p.system_name for p in extracted] == ["renewal_date"]
    assert extracted[0].rendered == "2026-03-01"
    assert len(failures) == 1


def test_dual_extract_one_call_per_chunk():
    comp = ScriptedCompleter()
    dual_extract(_extract_chunk(), [], comp)
    assert comp.call_count(PromptKind.DUAL_EXTRACT) == 1


# -- cross-chunk dedup ------------------------------------------------------


def _fact(text, chunk_index=0):
    return ExtractedFact(text=text, chunk_index=chunk_index)


def _xprop(pid, rendered, confidence, chunk_index=0, mode="replace"):
    return ExtractedProperty(
        property_id=pid,
        property_name=pid,
        system_name=pid,
        value=rendered,
        rendered=rendered,
        confidence=confidence,
        update_mode=mode,
        chunk_index=chunk_index,
    )


def test_fact_dedup_normalized_first_kept():
    facts = [
        _fact("Acme renewed the contract.", 0),
        _fact("acme  renewed the contract", 1),
        _fact("A different fact", 1),
    ]
    kept, _ = cross_chunk_dedup(facts, [])
    assert [f.text for f in kept] == ["Acme renewed the contract.", "A different fact"]
    assert kept[0].chunk_index == 0


def test_normalize_fact_text():
    assert normalize_fact_text("  Acme  Renewed. ") == "acme renewed"
    assert normalize_fact_text("Done!") == "done"


def test_prop_dedup_max_confidence():
    _, kept = cross_chunk_dedup(
        [], [_xprop("p-1", "450000", 0.7, 0), _xprop("p-1", "500000", 0.9, 1)]
    )
    assert len(kept) == 1
    assert kept[0].rendered == "500000"


def test_prop_dedup_tie_latest_chunk():
    _, kept = cross_chunk_dedup(
        [], [_xprop("p-1", "old", 0.8, 0), _xprop("p-1", "new", 0.8, 2)]
    )
    assert kept[0].rendered == "new"


def test_accumulate_keeps_distinct_values():
    _, kept = cross_chunk_dedup(
        [],
        [
            _xprop("p-1", "python", 0.9, 0, mode="accumulate"),
            _xprop("p-1", "django", 0.8, 1, mode="accumulate"),
        ],
    )
    assert [p.rendered for p in kept] == ["python", "django"]


def test_accumulate_drops_exact_repeat():
    _, kept = cross_chunk_dedup(
        [],
        [
            _xprop("p-1", "python", 0.9, 0, mode="accumulate"),
            _xprop("p-1", "python", 0.8, 1, mode="accumulate"),
        ],
    )
    assert len(kept) == 1


# -- quality gates ----------------------------------------------------------


def test_gates_clean_fact_scores_one():
    report = quality_gates([_fact("Acme Corp signed the renewal on 2024-03-02.")])
    assert report.coreference_score == 1.0
    assert report.self_containment_score == 1.0
    assert report.temporal_anchoring_score == 1.0


def test_gate_coreference_half():
    report = quality_gates(
        [_fact("He signed it."), _fact("Acme Corp signed the 2024 renewal.")]
    )
    # Oracle: 1 - flagged/total = 1 - 1/2.
    assert report.coreference_score == pytest.approx(1 - 1 / 2)
    assert report.flagged["coreference"] == [0]


def test_gate_temporal_relative_without_date():
    report = quality_gates([_fact("The Acme team met last week")])
    assert report.flagged["temporalAnchoring"] == [0]
    assert report.temporal_anchoring_score == 0.0


def test_gate_temporal_anchored_passes():
    report = quality_gates([_fact("The Acme team met last week of January 2026")])
    assert report.flagged["temporalAnchoring"] == []


def test_gate_self_containment_flags_openers_and_caseless():
    report = quality_gates(
        [
            _fact("This changed everything for Acme."),
            _fact("no capitalized token at all"),
            _fact("Acme Corp expanded to Berlin in 2024."),
        ]
    )
    assert report.flagged["selfContainment"] == [0, 1]
    assert report.self_containment_score == pytest.approx(1 - 2 / 3)


def test_gates_empty_batch_all_ones():
    report = quality_gates([])
    assert report.coreference_score == 1.0
    assert report.self_containment_score == 1.0
    assert report.temporal_anchoring_score == 1.0


def test_gate_scores_bounded():
    facts = [_fact("he said it recently"), _fact("she met them soon after")]
    report = quality_gates(facts)
    for score in (
        report.coreference_score,
        report.self_containment_score,
        report.temporal_anchoring_score,
    ):
        assert 0.0 <= score <= 1.0


# -- memorize ---------------------------------------------------------------


FACTS_A = [
    "Acme Corp renewed the platform contract for 24 months in January 2026.",
    "Maria Chen now leads procurement at Acme Corp.",
    "Acme Corp standardized on Postgres for analytics in 2025.",
]


def _memorize_completer(facts=FACTS_A, props=None, marker=None):
    response = {"facts": list(facts), "properties": list(props or [])}
    comp = ScriptedCompleter()
    comp.script(PromptKind.DUAL_EXTRACT, response, marker=marker)
    return comp


def _run(content, store, comp, schema=None, crm_keys=None, config=CONFIG, options=None):
    return memorize(
        content,
        "acme",
        store,
        EMB,
        comp,
        config,
        crm_keys=crm_keys,
        schema=schema,
        clock=CLOCK,
        options=options,
    )


def test_memorize_stores_then_skips_duplicates():
    store = _store()
    comp = _memorize_completer()
    first = _run("Quarterly review notes for Acme.", store, comp)
    assert first.stored_facts == 3
    assert first.skipped_duplicates == 0
    second = _run("Quarterly review notes for Acme.", store, comp)
    assert second.stored_facts == 0
    assert second.skipped_duplicates == first.stored_facts + first.stored_props
    assert store.count("acme") == 3


def test_memorize_redacts_before_storage():
    store = _store()
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {"facts": ["Card on file is [CREDIT_CARD] for Acme."], "properties": []},
    )
    report = _run("Customer card 4111111111111111 on file.", store, comp)
    assert report.redaction_applied
    assert any(a.entity_type == "creditCard" for a in report.audits)
    for sv in store.entries("acme"):
        assert "4111111111111111" not in sv.entry.text


def test_memorize_phase_two_catches_extracted_pii():
    store = _store()
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {"facts": ["Reach Maria Chen at maria.chen@acme.example for renewals."], "properties": []},
    )
    report = _run("Benign content with no direct identifiers.", store, comp)
    stored = [sv.entry.text for sv in store.entries("acme")]
    assert stored
    assert all("maria.chen@acme.example" not in text for text in stored)
    assert report.redaction_applied


def test_memorize_no_stored_text_matches_patterns():
    store = _store()
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {
            "facts": [
                "Contact email maria@acme.example about SSN 123-45-6789.",
                "Acme Corp signed on 2026-01-15.",
            ],
            "properties": [],
        },
    )
    _run("Plain content.", store, comp)
    for sv in store.entries("acme"):
        for pattern in DEFAULT_PATTERNS:
            for m in pattern.pattern.finditer(sv.entry.text):
                if pattern.validate is None:
                    raise AssertionError(
                        f"stored text matches {pattern.entity_type}: {sv.entry.text!r}"
                    )
                try:
                    assert not pattern.validate(m.group(0))
                except Exception:
                    pass


def test_memorize_provenance_content_hash():
    store = _store()
    content = "Notes about the Acme account from the March sync."
    _run(content, store, _memorize_completer())
    for sv in store.entries("acme"):
        assert sv.entry.provenance["contentHash"] == content_hash(content)
        assert sv.entry.provenance["extractionMethod"] == "dual_extract"
        assert sv.entry.provenance["llmModel"] == "scripted-v1"


def test_memorize_threshold_monotonicity():
    counts = []
    for threshold in (0.94, 0.92, 0.85, 0.70):
        store = _store()
        comp = ScriptedCompleter().script(
            PromptKind.DUAL_EXTRACT,
            {
                "facts": [
                    "alpha bravo charlie delta echo foxtrot golf hotel india juliet",
                    "alpha bravo charlie delta echo foxtrot golf hotel india kilo",
                    "alpha bravo charlie delta echo foxtrot golf hotel lima mike",
                    "completely unrelated subject matter entirely",
                ],
                "properties": [],
            },
        )
        config = replace(CONFIG, write_dedup_threshold=threshold)
        report = _run("fixture content", store, comp, config=config)
        counts.append(report.stored_facts)
    assert counts == sorted(counts, reverse=True)


def test_memorize_deterministic_reports():
    def run_once():
        store = _store()
        comp = _memorize_completer(
            props=[{"systemName": "industry", "value": "retail", "confidence": 0.9}]
        )
        schema = _schema(_prop("industry", type="options", options=("retail",), description="company industry sector retail fintech"))
        report = _run(
            "Industry review for Acme retail operations.", store, comp, schema=schema
        )
        return report.to_json()

    assert run_once() == run_once()


def test_memorize_gate_drop_mode():
    store = _store()
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {
            "facts": ["He signed it.", "Acme Corp signed the 2026 renewal."],
            "properties": [],
        },
    )
    report = _run(
        "content", store, comp, options=PipelineOptions(drop_gated_facts=True)
    )
    assert report.stored_facts == 1
    assert report.dropped_by_gates == 1
    texts = [sv.entry.text for sv in store.entries("acme")]
    assert texts == ["Acme Corp signed the 2026 renewal."]


def test_memorize_all_chunks_failing_raises():
    store = _store()
    with pytest.raises(PipelineFailed):
        _run("content that will not extract", store, FailingCompleter())
    assert store.count("acme") == 0


def test_memorize_partial_chunk_failure_continues():
    class FlakyCompleter:
        def __init__(self):
            self.n = 0

        def complete(self, request):
            self.n += 1
            if self.n == 1:
                raise ProviderFailure("first chunk fails")
            return {"facts": [f"Acme fact {self.n} recorded in 2026."], "properties": []}

        def model_id(self):
            return "flaky"

    long_content = " ".join(
        f"Sentence {i} about the Acme account history and renewals." for i in range(80)
    )
    store = _store()
    report = _run(long_content, store, FlakyCompleter())
    assert report.failed_chunks == [0]
    assert report.stored_facts >= 1


def test_memorize_empty_content_rejected():
    with pytest.raises(EmptyContent):
        _run("   ", _store(), ScriptedCompleter())


def test_memorize_entity_scoped_dedup():
    store = _store()
    comp = ScriptedCompleter().script(
        PromptKind.DUAL_EXTRACT,
        {"facts": ["Prefers email over phone for outreach."], "properties": []},
    )
    a = _run("note", store, comp, crm_keys=CRMKeys(record_id="e-1"))
    b = _run("note", store, comp, crm_keys=CRMKeys(record_id="e-2"))
    assert a.stored_facts == 1
    assert b.stored_facts == 1
    assert b.skipped_duplicates == 0
    assert store.count("acme") == 2


def test_memorize_property_replace_updates_in_place():
    schema = _schema(
        _prop("deal_value", type="number", description="deal value contract amount dollars")
    )
    store = _store()
    comp1 = _memorize_completer(
        facts=[], props=[{"systemName": "deal_value", "value": 450000, "confidence": 0.9}]
    )
    _run("Deal value update: contract amount 450000 dollars.", store, comp1, schema=schema)
    comp2 = _memorize_completer(
        facts=[], props=[{"systemName": "deal_value", "value": 500000, "confidence": 0.95}]
    )
    second = _run(
        "Deal value revised: contract amount now 500000 dollars.",
        store,
        comp2,
        schema=schema,
    )
    assert second.stored_props == 1
    prop_entries = store.entries("acme", memory_type="property_value")
    assert len(prop_entries) == 1
    assert prop_entries[0].entry.property_value == "500000"


def test_memorize_accumulate_properties_coexist():
    schema = _schema(
        _prop(
            "tech_stack",
            description="technology stack languages frameworks platforms",
            update_mode="accumulate",
        )
    )
    store = _store()
    comp1 = _memorize_completer(
        facts=[], props=[{"systemName": "tech_stack", "value": "python", "confidence": 0.9}]
    )
    _run("Their technology stack languages include python.", store, comp1, schema=schema)
    comp2 = _memorize_completer(
        facts=[], props=[{"systemName": "tech_stack", "value": "terraform", "confidence": 0.9}]
    )
    _run(
        "Their technology stack platforms include terraform.", store, comp2, schema=schema
    )
    values = sorted(
        sv.entry.property_value for sv in store.entries("acme", memory_type="property_value")
    )
    assert values == ["python", "terraform"]


def test_memorize_registers_entity_for_later_resolution():
    store = _store()
    comp = _memorize_completer()
    keys = CRMKeys(record_id="e-99", email="lead@acme.example")
    _run("intro call notes", store, comp, crm_keys=keys)
    assert store.entity_registry("acme")["e-99"].email == "lead@acme.example"
    from orgmem.core import resolve_entity

    assert resolve_entity(CRMKeys(email="LEAD@acme.example"), store, "acme") == "e-99"
