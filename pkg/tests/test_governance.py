"""Tests for governance variables, tiered routing, and session delivery."""

from __future__ import annotations

import random
import uuid
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orgmem.core import EngineConfig, ManualClock, estimate_tokens, parse_iso
from orgmem.governance import (
    ALL_SECTIONS,
    EmptyLibrary,
    GovernanceRouter,
    GovernanceVariable,
    InvalidVariable,
    SessionExpired,
    SessionState,
    VariableLibrary,
    critical_cap,
    deliver_delta,
    embedding_prefilter,
    enrich_variable,
    extract_sections,
    fast_route,
    full_route,
    make_variable,
    parse_headings,
    score_variable,
)
from orgmem.providers import (
    FailingCompleter,
    HashEmbedder,
    PromptKind,
    ScriptedCompleter,
)

EMB = HashEmbedder()
CONFIG = EngineConfig()

DOC = (
    "Intro preamble.\n"
    "\n"
    "# Alpha\n"
    "\n"
    "Alpha body line.\n"
    "\n"
    "## Alpha One\n"
    "\n"
    "Nested body.\n"
    "\n"
    "# Beta\n"
    "\n"
    "Beta body.\n"
    "\n"
    "# Gamma\n"
    "\n"
    "Gamma body.\n"
)


def _doc_var(var_id="doc", org="acme"):
    return make_variable(org, "Handbook", DOC, var_id=var_id)


def _offsets():
    heads = parse_headings(DOC)
    return {title: off for _, title, off in heads}


# ---------------------------------------------------------------- headings


def test_parse_headings_levels_and_offsets():
    heads = parse_headings(DOC)
    assert [(lvl, title) for lvl, title, _ in heads] == [
        (1, "Alpha"),
        (2, "Alpha One"),
        (1, "Beta"),
        (1, "Gamma"),
    ]
    offsets = [off for _, _, off in heads]
    assert offsets == sorted(offsets)
    assert all(DOC[off] == "#" for off in offsets)


def test_decreasing_heading_offsets_rejected():
    with pytest.raises(InvalidVariable):
        GovernanceVariable(
            id="v", org_id="acme", name="n", content="x",
            headings=((1, "A", 10), (1, "B", 5)),
        )


# ------------------------------------------------------------- enrichment


def test_enrich_hype_query_cardinality():
    comp = ScriptedCompleter().script(
        PromptKind.HYPE_QUERIES,
        {"queries": ["q1", "q2", "q3", "q4", "q5"]},
    )
    v = enrich_variable(_doc_var(), comp, EMB)
    assert v.hype_queries == ("q1", "q2", "q3", "q4", "q5")
    assert len(v.hype_embeddings) == 5
    assert all(abs(np.linalg.norm(e) - 1.0) < 1e-9 for e in v.hype_embeddings)


def test_enrich_always_on_flows_into_fast_route():
    comp = ScriptedCompleter().script(
        PromptKind.SCOPE_INFERENCE,
        {"alwaysOn": True, "triggerKeywords": ["vpn"]},
    )
    lib = VariableLibrary(EMB, comp)
    v = lib.add(_doc_var())
    assert v.always_on is True
    routed = fast_route("totally unrelated crochet question", lib.list("acme"),
                        EMB, CONFIG)
    assert [c.variable_id for c in routed.critical] == [v.id]


def test_enrich_fail_neutral_on_provider_failure():
    draft = make_variable("acme", "Handbook", DOC, tags=("hr", "onboarding"))
    v = enrich_variable(draft, FailingCompleter(), EMB)
    assert v.hype_queries == ()
    assert v.hype_embeddings == ()
    assert v.always_on is False
    assert v.trigger_keywords == ("hr", "onboarding")
    assert v.content_embedding is not None


def test_enrich_without_completer_still_embeds():
    v = enrich_variable(_doc_var(), None, EMB)
    assert v.content_embedding is not None
    assert v.hype_queries == ()


def test_enrich_requires_name_and_content():
    with pytest.raises(InvalidVariable):
        enrich_variable(make_variable("acme", "", DOC), None, EMB)
    with pytest.raises(InvalidVariable):
        enrich_variable(make_variable("acme", "n", ""), None, EMB)


def test_update_bumps_version_and_regenerates_embeddings():
    lib = VariableLibrary(EMB)
    v = lib.add(_doc_var())
    assert v.version == 1
    updated = lib.update("acme", v.id, content="# Only\n\nNew text.\n")
    assert updated.version == 2
    assert [t for _, t, _ in updated.headings] == ["Only"]
    assert not np.allclose(updated.content_embedding, v.content_embedding)
    assert lib.get("acme", v.id).version == 2


def test_update_missing_variable_raises():
    lib = VariableLibrary(EMB)
    with pytest.raises(KeyError):
        lib.update("acme", "nope", name="x")


# ---------------------------------------------------------------- scoring


def test_score_always_in_unit_interval_when_stacked():
    comp = ScriptedCompleter().script(
        PromptKind.SCOPE_INFERENCE,
        {"alwaysOn": False, "triggerKeywords": ["handbook", "alpha"]},
    )
    v = enrich_variable(_doc_var(), comp, EMB)
    task = v.metadata_text() + " " + DOC + " handbook alpha"
    score = score_variable(task, EMB.embed_one(task), v, CONFIG)
    assert 0.0 <= score <= 1.0
    assert score > CONFIG.fast_route_critical_cutoff


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=80))
def test_score_clamped_for_arbitrary_tasks(task):
    v = enrich_variable(_doc_var(), None, EMB)
    score = score_variable(task, EMB.embed_one(task), v, CONFIG)
    assert 0.0 <= score <= 1.0


def test_critical_cap_formula():
    assert critical_cap(1) == 2
    assert critical_cap(10) == 2
    assert critical_cap(11) == 3
    assert critical_cap(15) == 3
    assert critical_cap(25) == 5
    assert critical_cap(100) == 5


# -------------------------------------------------------------- fast route


def test_fast_route_empty_library_raises():
    with pytest.raises(EmptyLibrary):
        fast_route("anything", [], EMB, CONFIG)


def test_single_always_on_variable_is_critical():
    comp = ScriptedCompleter().script(
        PromptKind.SCOPE_INFERENCE, {"alwaysOn": True, "triggerKeywords": []}
    )
    lib = VariableLibrary(EMB, comp)
    v = lib.add(_doc_var())
    routed = fast_route("arbitrary task text", lib.list("acme"), EMB, CONFIG)
    assert len(routed.critical) == 1
    assert routed.critical[0].variable_id == v.id
    assert routed.critical[0].resolved_text == DOC
    assert routed.token_count == estimate_tokens(DOC)


def test_fast_route_makes_no_completion_calls():
    comp = ScriptedCompleter()
    lib = VariableLibrary(EMB, comp)
    for i in range(4):
        lib.add(make_variable("acme", f"Var {i}", f"content {i}", var_id=f"v-{i}"))
    before = comp.call_count()
    fast_route("some task about content", lib.list("acme"), EMB, CONFIG)
    assert comp.call_count() == before
    assert comp.call_count(PromptKind.FULL_ROUTE_ANALYSIS) == 0


def test_fast_route_cap_and_supplementary_reasons():
    comp = ScriptedCompleter()
    for i in range(7):
        comp.script(
            PromptKind.HYPE_QUERIES,
            {"queries": [f"hot topic {i}", "shared magic phrase"]},
            marker=f"Hot {i}",
        )
    lib = VariableLibrary(EMB, comp)
    for i in range(7):
        lib.add(make_variable("acme", f"Hot {i}", f"hot content {i}",
                              var_id=f"h-{i}"))
    for i in range(18):
        lib.add(make_variable("acme", f"Cold {i}", f"unrelated filler {i}",
                              var_id=f"z-{i}"))
    routed = fast_route("shared magic phrase", lib.list("acme"), EMB, CONFIG)
    assert [c.variable_id for c in routed.critical] == [f"h-{i}" for i in range(5)]
    assert [s.variable_id for s in routed.supplementary[:2]] == ["h-5", "h-6"]
    assert [s.reason for s in routed.supplementary[:2]] == ["overCap", "overCap"]
    assert len(routed.supplementary) == 5
    assert all(s.reason == "belowCutoff" for s in routed.supplementary[2:])


# Routing-quality fixture: 25 variables across 5 categories with designed
# metadata, 20 tasks phrased like the synthetic queries.
CATEGORY_TOPICS = {
    "security": [
        "password rotation cadence", "incident response runbook",
        "vendor risk review", "badge entry protocol", "encryption standards",
    ],
    "billing": [
        "invoice dispute handling", "refund approval limits",
        "proration arithmetic", "credit memo issuance", "late payment fees",
    ],
    "support": [
        "escalation ladder", "ticket severity matrix",
        "outage communication", "sla latency targets", "apology credits",
    ],
    "sales": [
        "discount authorization grid", "competitor battlecards",
        "demo environment setup", "contract redlines", "territory assignment",
    ],
    "legal": [
        "data processing addendum", "trademark usage", "export controls",
        "nda turnaround", "records retention schedule",
    ],
}


def _quality_library():
    comp = ScriptedCompleter()
    lib = VariableLibrary(EMB, comp)
    targets = {}
    for category, topics in CATEGORY_TOPICS.items():
        for i, topic in enumerate(topics):
            var_id = f"{category}-{i}"
            comp.script(
                PromptKind.HYPE_QUERIES,
                {"queries": [
                    f"explain the {topic}",
                    f"where is the {topic} documented",
                    f"{topic} guidance",
                ]},
                marker=topic,
            )
            lib.add(
                make_variable(
                    "acme",
                    topic.title(),
                    f"# {topic.title()}\n\nGuidance for {topic} in daily work.\n",
                    description=f"How we handle {topic}",
                    tags=(category,),
                    var_id=var_id,
                )
            )
            targets[topic] = var_id
    return lib, targets


def test_routing_precision_and_recall_on_designed_fixture():
    lib, targets = _quality_library()
    library = lib.list("acme")
    topics = [t for topics in CATEGORY_TOPICS.values() for t in topics][:20]
    tp = fp = fn = 0
    for topic in topics:
        routed = fast_route(f"explain the {topic}", library, EMB, CONFIG)
        got = {c.variable_id for c in routed.critical}
        want = {targets[topic]}
        tp += len(got & want)
        fp += len(got - want)
        fn += len(want - got)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    assert precision >= 0.9
    assert recall >= 0.85


def test_rich_metadata_beats_bare_by_twenty_points():
    content = (
        "# Policy\n\nSubmit receipts within thirty days. "
        "Approvals required beyond the stated limits.\n"
    )
    tasks = [
        "how do I claim travel expenses",
        "expense report for a client dinner",
        "software subscription reimbursement",
        "can I expense a hotel night",
        "meal spending limit on trips",
        "reimbursement for conference tickets",
        "mileage expense claim",
        "per diem rules for travel",
        "company card expense policy",
        "who approves my expense report",
    ]

    def build(rich):
        comp = ScriptedCompleter()
        lib = VariableLibrary(EMB, comp)
        if rich:
            comp.script(
                PromptKind.HYPE_QUERIES,
                {"queries": [
                    "how do I claim travel expenses",
                    "expense report for a client dinner",
                    "software subscription reimbursement",
                    "can I expense a hotel night",
                    "meal spending limit on trips",
                    "who approves my expense report",
                ]},
                marker="Expense Reimbursement",
            )
            comp.script(
                PromptKind.SCOPE_INFERENCE,
                {"alwaysOn": False,
                 "triggerKeywords": ["expense", "reimbursement"]},
                marker="Expense Reimbursement",
            )
            lib.add(make_variable(
                "acme", "Expense Reimbursement Policy", content,
                description="claiming travel meal and software expenses "
                            "for reimbursement and approval",
                tags=("finance", "expenses", "reimbursement"),
                var_id="target",
            ))
        else:
            lib.add(make_variable("acme", "doc-17", content, var_id="target"))
        for i in range(5):
            lib.add(make_variable(
                "acme", f"Other {i}", f"# Other\n\nDistractor text {i}.\n",
                var_id=f"o-{i}",
            ))
        return lib

    def discovery(lib):
        hits = 0
        for task in tasks:
            routed = fast_route(task, lib.list("acme"), EMB, CONFIG)
            if "target" in {c.variable_id for c in routed.critical}:
                hits += 1
        return hits / len(tasks)

    rich_rate = discovery(build(rich=True))
    bare_rate = discovery(build(rich=False))
    assert rich_rate - bare_rate >= 0.20


# -------------------------------------------------------------- prefilter


class VecEmbedder:
    """Maps exact strings to pre-built vectors; everything else errors."""

    def __init__(self, mapping, dim=256):
        self.mapping = mapping
        self.dim = dim

    def embed_one(self, text):
        return self.mapping[text]

    def embed(self, texts):
        return [self.embed_one(t) for t in texts]

    def dimension(self):
        return self.dim


def _axis(i, dim=256):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def _with_cosine(target, ortho_axis, cos):
    v = cos * target + np.sqrt(1 - cos * cos) * ortho_axis
    return v / np.linalg.norm(v)


def test_prefilter_unembedded_variables_pass_through():
    task_vec = _axis(0)
    emb = VecEmbedder({"q": task_vec})
    plain = GovernanceVariable(id="plain", org_id="a", name="n", content="c")
    low = GovernanceVariable(
        id="low", org_id="a", name="n", content="c",
        content_embedding=_with_cosine(task_vec, _axis(1), 0.05),
    )
    kept = embedding_prefilter("q", [plain] + [low], emb)
    assert plain in kept


def test_prefilter_top_k_branch():
    task_vec = _axis(0)
    emb = VecEmbedder({"q": task_vec})
    library = []
    for i in range(30):
        cos = 0.40 if i < 3 else 0.25 - i * 0.005
        library.append(GovernanceVariable(
            id=f"v-{i:02d}", org_id="a", name="n", content="c",
            content_embedding=_with_cosine(task_vec, _axis(i + 1), cos),
        ))
    kept = embedding_prefilter("q", library, emb)
    assert len(kept) == 12
    assert {f"v-{i:02d}" for i in range(3)} <= {v.id for v in kept}


def test_prefilter_keeps_all_above_min_score():
    task_vec = _axis(0)
    emb = VecEmbedder({"q": task_vec})
    library = [
        GovernanceVariable(
            id=f"v-{i:02d}", org_id="a", name="n", content="c",
            content_embedding=_with_cosine(task_vec, _axis(i + 1), 0.5),
        )
        for i in range(15)
    ]
    kept = embedding_prefilter("q", library, emb)
    assert len(kept) == 15


def test_prefilter_empty_library():
    assert embedding_prefilter("q", [], EMB) == []


# -------------------------------------------------------------- full route


def _two_var_library(comp=None):
    lib = VariableLibrary(EMB, comp)
    v1 = lib.add(make_variable("acme", "Rules One", "rules one body",
                               var_id="v1"))
    v2 = lib.add(make_variable("acme", "Rules Two", "rules two body",
                               var_id="v2"))
    return lib, v1, v2


def test_full_route_passthrough_selection():
    comp = ScriptedCompleter().script(
        PromptKind.FULL_ROUTE_ANALYSIS,
        {"selections": [
            {"variableId": "v1", "priority": "critical", "mode": "full",
             "reasoning": "directly relevant"},
            {"variableId": "v2", "priority": "supplementary",
             "reasoning": "related"},
        ]},
    )
    lib, v1, v2 = _two_var_library(comp)
    routed = full_route("task", lib.list("acme"), EMB, comp, CONFIG)
    assert routed.mode == "full"
    assert [c.variable_id for c in routed.critical] == ["v1"]
    assert routed.critical[0].resolved_text == "rules one body"
    assert [(s.variable_id, s.reason) for s in routed.supplementary] == [
        ("v2", "related")
    ]


def test_full_route_promotes_top_two_supplementary():
    comp = ScriptedCompleter().script(
        PromptKind.FULL_ROUTE_ANALYSIS,
        {"selections": [
            {"variableId": "v1", "priority": "supplementary", "reasoning": "a"},
            {"variableId": "v2", "priority": "supplementary", "reasoning": "b"},
            {"variableId": "v3", "priority": "supplementary", "reasoning": "c"},
        ]},
    )
    lib = VariableLibrary(EMB, comp)
    for i in (1, 2, 3):
        lib.add(make_variable("acme", f"R{i}", f"body {i}", var_id=f"v{i}"))
    routed = full_route("task", lib.list("acme"), EMB, comp, CONFIG)
    assert [c.variable_id for c in routed.critical] == ["v1", "v2"]
    assert all(c.mode == "full" for c in routed.critical)
    assert [s.variable_id for s in routed.supplementary] == ["v3"]


def test_full_route_missing_section_delivers_full_content():
    comp = ScriptedCompleter().script(
        PromptKind.FULL_ROUTE_ANALYSIS,
        {"selections": [
            {"variableId": "doc", "priority": "critical", "mode": "section",
             "sections": ["Nonexistent Heading"]},
        ]},
    )
    lib = VariableLibrary(EMB, comp)
    lib.add(_doc_var())
    routed = full_route("task", lib.list("acme"), EMB, comp, CONFIG)
    assert routed.critical[0].resolved_text == DOC


def test_full_route_provider_failure_degrades_to_fast():
    comp = ScriptedCompleter().script(
        PromptKind.SCOPE_INFERENCE, {"alwaysOn": True, "triggerKeywords": []}
    )
    lib = VariableLibrary(EMB, comp)
    lib.add(_doc_var())
    routed = full_route("task", lib.list("acme"), EMB, FailingCompleter(),
                        CONFIG)
    assert routed.mode == "fast"
    assert [c.variable_id for c in routed.critical] == ["doc"]


def test_full_route_without_completer_falls_back_to_fast():
    lib = VariableLibrary(EMB)
    lib.add(_doc_var())
    routed = full_route("task", lib.list("acme"), EMB, None, CONFIG)
    assert routed.mode == "fast"


# ---------------------------------------------------------------- sections


def test_extract_single_section_body():
    v = enrich_variable(_doc_var(), None, EMB)
    offsets = _offsets()
    expected = DOC[offsets["Beta"]:offsets["Gamma"]]
    assert extract_sections(v, ["Beta"]) == expected
    assert "Beta body." in expected
    assert "Gamma" not in expected


def test_extract_missing_title_returns_full_content():
    v = enrich_variable(_doc_var(), None, EMB)
    assert extract_sections(v, ["Beta", "Missing"]) == DOC


def test_extract_document_order_regardless_of_request_order():
    v = enrich_variable(_doc_var(), None, EMB)
    offsets = _offsets()
    expected = DOC[offsets["Alpha"]:offsets["Beta"]] + DOC[offsets["Gamma"]:]
    assert extract_sections(v, ["Gamma", "Alpha"]) == expected
    assert extract_sections(v, ["Alpha", "Gamma"]) == expected


def test_extract_section_spans_nested_subsections():
    v = enrich_variable(_doc_var(), None, EMB)
    got = extract_sections(v, ["Alpha"])
    assert "Alpha One" in got
    assert "Beta" not in got


def test_extract_parent_child_overlap_collapses():
    v = enrich_variable(_doc_var(), None, EMB)
    assert extract_sections(v, ["Alpha", "Alpha One"]) == extract_sections(
        v, ["Alpha"]
    )


def test_extract_all_headings_is_content_minus_preamble():
    v = enrich_variable(_doc_var(), None, EMB)
    titles = [t for _, t, _ in v.headings]
    first = v.headings[0][2]
    assert extract_sections(v, titles) == DOC[first:]


def test_extract_case_insensitive_match():
    v = enrich_variable(_doc_var(), None, EMB)
    assert extract_sections(v, ["beta"]) == extract_sections(v, ["Beta"])


def test_extract_no_titles_is_empty():
    v = enrich_variable(_doc_var(), None, EMB)
    assert extract_sections(v, []) == ""


# -------------------------------------------------------------- auto mode


def _router(n_vars, completer=None, clock=None, always_on_ids=()):
    comp_setup = ScriptedCompleter()
    for var_id in always_on_ids:
        comp_setup.script(
            PromptKind.SCOPE_INFERENCE,
            {"alwaysOn": True, "triggerKeywords": []},
            marker=f"Name {var_id}",
        )
    lib = VariableLibrary(EMB, comp_setup)
    for i in range(n_vars):
        lib.add(make_variable("acme", f"Name v-{i}", f"# H{i}\n\nBody {i}.\n",
                              var_id=f"v-{i}"))
    return GovernanceRouter(lib, EMB, completer=completer,
                            config=CONFIG, clock=clock)


def test_auto_large_library_routes_fast_without_calls():
    comp = ScriptedCompleter()
    router = _router(40, completer=comp)
    before = comp.call_count()
    routed = router.route("task", "acme", mode="auto")
    assert routed.mode == "fast"
    assert comp.call_count() == before


def test_auto_mode_boundary_at_fifteen():
    comp = ScriptedCompleter()
    assert _router(15, completer=comp).resolve_mode("acme", "auto") == "full"
    assert _router(16, completer=comp).resolve_mode("acme", "auto") == "fast"


def test_auto_small_without_provider_is_fast():
    assert _router(5).resolve_mode("acme", "auto") == "fast"


def test_auto_small_with_provider_uses_full_path():
    comp = ScriptedCompleter().script(
        PromptKind.FULL_ROUTE_ANALYSIS,
        {"selections": [{"variableId": "v-0", "priority": "critical",
                         "mode": "full"}]},
    )
    router = _router(10, completer=comp)
    routed = router.route("task", "acme", mode="auto")
    assert routed.mode == "full"
    assert comp.call_count(PromptKind.FULL_ROUTE_ANALYSIS) == 1
    assert [c.variable_id for c in routed.critical] == ["v-0"]


# ------------------------------------------------------- session delivery


def test_fast_route_with_session_records_delivery():
    router = _router(3, always_on_ids=["v-0"])
    routed = router.route("task", "acme", session_id="s1", mode="fast")
    assert routed.mode == "fast"
    session = router.sessions.get("s1")
    assert session is not None
    assert ALL_SECTIONS in session.delivered["v-0"]


def test_repeat_full_delivery_excluded_second_call():
    router = _router(3, always_on_ids=["v-0"])
    first = router.route("task", "acme", session_id="s1", mode="fast")
    assert any(c.variable_id == "v-0" for c in first.critical)
    second = router.route("task", "acme", session_id="s1", mode="fast")
    assert all(c.variable_id != "v-0" for c in second.critical)
    assert second.token_count == 0


def test_partial_section_delivery_narrows_to_new_titles():
    content = (
        "# Pricing\n\nList prices and discounts.\n\n"
        "# Refunds\n\nRefund windows and approvals.\n"
    )
    comp = (
        ScriptedCompleter()
        .script(
            PromptKind.FULL_ROUTE_ANALYSIS,
            {"selections": [{"variableId": "pol", "priority": "critical",
                             "mode": "section", "sections": ["Pricing"]}]},
            marker="task one",
        )
        .script(
            PromptKind.FULL_ROUTE_ANALYSIS,
            {"selections": [{"variableId": "pol", "priority": "critical",
                             "mode": "section",
                             "sections": ["Pricing", "Refunds"]}]},
            marker="task two",
        )
    )
    lib = VariableLibrary(EMB, comp)
    policy = lib.add(make_variable("acme", "Policy", content, var_id="pol"))
    router = GovernanceRouter(lib, EMB, completer=comp, config=CONFIG)

    first = router.route("task one", "acme", session_id="s1", mode="full")
    assert first.critical[0].section_titles == ("Pricing",)
    refunds_start = next(off for _, t, off in policy.headings if t == "Refunds")
    second = router.route("task two", "acme", session_id="s1", mode="full")
    assert second.critical[0].section_titles == ("Refunds",)
    assert second.critical[0].resolved_text == content[refunds_start:]


def test_supplementary_not_recorded_can_promote_later():
    comp = ScriptedCompleter()
    comp.script(
        PromptKind.HYPE_QUERIES,
        {"queries": ["quarterly audit checklist"]},
        marker="Audit",
    )
    lib = VariableLibrary(EMB, comp)
    lib.add(make_variable("acme", "Audit Guide", "audit steps", var_id="aud"))
    for i in range(3):
        lib.add(make_variable("acme", f"Pad {i}", f"padding {i}",
                              var_id=f"p-{i}"))
    router = GovernanceRouter(lib, EMB, config=CONFIG)

    weak = router.route("unrelated gardening question", "acme",
                        session_id="s1", mode="fast")
    assert "aud" in {s.variable_id for s in weak.supplementary}
    assert "aud" not in router.sessions.get("s1").delivered

    strong = router.route("quarterly audit checklist", "acme",
                          session_id="s1", mode="fast")
    delivered = {c.variable_id: c.resolved_text for c in strong.critical}
    assert delivered.get("aud") == "audit steps"


def test_session_expiry_resets_delivery():
    clock = ManualClock("2026-05-01T00:00:00+00:00")
    router = _router(3, clock=clock, always_on_ids=["v-0"])
    first = router.route("task", "acme", session_id="s1", mode="fast")
    assert any(c.variable_id == "v-0" for c in first.critical)
    clock.advance(25 * 3600)
    again = router.route("task", "acme", session_id="s1", mode="fast")
    assert any(c.variable_id == "v-0" for c in again.critical)


def test_deliver_delta_raises_on_expired_session():
    clock = ManualClock("2026-05-01T00:00:00+00:00")
    lib = VariableLibrary(EMB)
    lib.add(make_variable("acme", "N", "body", var_id="v"))
    routed = fast_route("body task", lib.list("acme"), EMB, CONFIG)
    stale = SessionState(
        session_id="s", org_id="acme",
        created_at=parse_iso("2026-04-01T00:00:00+00:00"),
        last_touched=parse_iso("2026-04-01T00:00:00+00:00"),
    )
    with pytest.raises(SessionExpired):
        deliver_delta(routed, stale, lib, CONFIG, clock)


def test_session_store_sweep_drops_expired():
    clock = ManualClock("2026-05-01T00:00:00+00:00")
    router = _router(2, clock=clock)
    router.route("task", "acme", session_id="s1", mode="fast")
    router.route("task", "acme", session_id="s2", mode="fast")
    clock.advance(25 * 3600)
    assert router.sessions.sweep() == 2
    assert router.sessions.get("s1") is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=4), max_size=8))
def test_no_variable_section_resolved_twice_in_session(task_choices):
    comp = ScriptedCompleter().script(
        PromptKind.FULL_ROUTE_ANALYSIS,
        {"selections": [
            {"variableId": "v-0", "priority": "critical", "mode": "section",
             "sections": ["H0"]},
            {"variableId": "v-1", "priority": "critical", "mode": "full"},
        ]},
    )
    router = _router(5, completer=comp, always_on_ids=["v-2"])
    session_id = uuid.uuid4().hex
    seen: set[tuple[str, str]] = set()
    rng = random.Random(42)
    for idx in task_choices:
        mode = rng.choice(["fast", "full"])
        routed = router.route(f"task {idx} body", "acme",
                              session_id=session_id, mode=mode)
        for item in routed.critical:
            if item.mode == "section":
                keys = [(item.variable_id, t.lower())
                        for t in item.section_titles]
            else:
                keys = [(item.variable_id, ALL_SECTIONS)]
            for key in keys:
                assert key not in seen
                seen.add(key)


# ------------------------------------------------------------ json output


def test_routed_context_json_shape():
    router = _router(2, always_on_ids=["v-0"])
    routed = router.route("task", "acme", mode="fast")
    data = routed.to_json()
    assert data["mode"] == "fast"
    assert isinstance(data["tokenCount"], int)
    assert data["critical"][0]["variableId"] == "v-0"
    assert "resolvedText" in data["critical"][0]
    for item in data["supplementary"]:
        assert set(item) == {"variableId", "reason"}
        assert "resolvedText" not in item


def test_compile_context_delimiters():
    router = _router(2, always_on_ids=["v-0"])
    routed = router.route("task", "acme", mode="fast")
    block = router.compile_context(routed, "acme")
    assert "--- [Name v-0] (v1) ---" in block
    assert "Body 0." in block


def test_library_crud_surface():
    lib = VariableLibrary(EMB)
    v = lib.add(make_variable("acme", "N", "body", var_id="v"))
    assert lib.get("acme", "v") == v
    assert lib.get("other", "v") is None
    assert lib.size("acme") == 1
    assert lib.remove("acme", "v") is True
    assert lib.remove("acme", "v") is False
    assert lib.list("acme") == []
