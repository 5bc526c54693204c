"""Governance variable library, tiered routing, and session delivery.

Variables are org-scoped policy documents enriched at creation time with
synthetic queries, inferred scope, and content-aware embeddings. Routing
selects which variables an agent task needs: the fast path is pure
vector and keyword arithmetic, the full path asks a completion provider
to pick variables and sections. Within a session, content already
delivered is never resolved twice.
"""

from __future__ import annotations

import math
import re
import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Any

import numpy as np

from .core import Clock, EngineConfig, estimate_tokens
from .providers import (
    CompletionRequest,
    PromptKind,
    ProviderFailure,
    cosine,
)

VISIBILITIES = ("organization", "private", "adminsOnly")
ACCESS_LEVELS = ("readOnly", "cloneable", "editable")

ALL_SECTIONS = "__all__"

PREFILTER_TOP_K = 12
PREFILTER_MIN_SCORE = 0.30

HYPE_QUERY_CAP = 8


class InvalidVariable(ValueError):
    pass


class EmptyLibrary(LookupError):
    pass


class SessionExpired(RuntimeError):
    pass


class ForeignSession(LookupError):
    """Session id exists but belongs to a different organization."""


_HEADING_RE = re.compile(r"^(#{1,6})\s+(.+?)\s*$", re.MULTILINE)


def parse_headings(content: str) -> tuple[tuple[int, str, int], ...]:
    """Markdown heading hierarchy as (level, title, charOffset) triples."""
    return tuple(
        (len(m.group(1)), m.group(2), m.start())
        for m in _HEADING_RE.finditer(content)
    )


@dataclass(frozen=True)
class GovernanceVariable:
    id: str
    org_id: str
    name: str
    content: str
    description: str = ""
    tags: tuple[str, ...] = ()
    headings: tuple[tuple[int, str, int], ...] = ()
    hype_queries: tuple[str, ...] = ()
    always_on: bool = False
    trigger_keywords: tuple[str, ...] = ()
    content_embedding: np.ndarray | None = None
    hype_embeddings: tuple[np.ndarray, ...] = ()
    visibility: str = "organization"
    access_level: str = "editable"
    version: int = 1

    def __post_init__(self) -> None:
        if self.visibility not in VISIBILITIES:
            raise InvalidVariable(f"unknown visibility {self.visibility!r}")
        if self.access_level not in ACCESS_LEVELS:
            raise InvalidVariable(f"unknown accessLevel {self.access_level!r}")
        offsets = [offset for _, _, offset in self.headings]
        if offsets != sorted(set(offsets)):
            raise InvalidVariable("heading offsets must be strictly increasing")

    def metadata_text(self) -> str:
        parts = [self.name, self.description]
        parts.extend(self.tags)
        return " ".join(p for p in parts if p)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "orgId": self.org_id,
            "name": self.name,
            "description": self.description,
            "tags": list(self.tags),
            "content": self.content,
            "headings": [
                {"level": lvl, "title": title, "charOffset": off}
                for lvl, title, off in self.headings
            ],
            "hypeQueries": list(self.hype_queries),
            "alwaysOn": self.always_on,
            "triggerKeywords": list(self.trigger_keywords),
            "visibility": self.visibility,
            "accessLevel": self.access_level,
            "version": self.version,
        }


def make_variable(
    org_id: str,
    name: str,
    content: str,
    description: str = "",
    tags: tuple[str, ...] | list[str] = (),
    var_id: str | None = None,
    visibility: str = "organization",
    access_level: str = "editable",
) -> GovernanceVariable:
    """Unenriched draft with headings parsed from the content."""
    return GovernanceVariable(
        id=var_id or f"gv-{uuid.uuid4().hex[:12]}",
        org_id=org_id,
        name=name,
        content=content,
        description=description,
        tags=tuple(tags),
        headings=parse_headings(content),
    )


def enrich_variable(
    variable: GovernanceVariable, completer, embedder
) -> GovernanceVariable:
    """Creation-time enrichment: synthetic queries, scope, embeddings.

    Each step fails neutral on provider errors so a variable is always
    usable afterwards; without a completer the synthetic-query and scope
    steps degrade the same way.
    """
    if not variable.name or not variable.content:
        raise InvalidVariable("name and content are required before enrichment")

    queries: list[str] = []
    if completer is not None:
        try:
            response = completer.complete(
                CompletionRequest(
                    PromptKind.HYPE_QUERIES,
                    {
                        "name": variable.name,
                        "description": variable.description,
                        "content": variable.content[:500],
                    },
                )
            )
            raw = response.get("queries", [])
            if isinstance(raw, list):
                queries = [q for q in raw if isinstance(q, str) and q.strip()]
                queries = queries[:HYPE_QUERY_CAP]
        except ProviderFailure:
            queries = []

    always_on = False
    triggers = tuple(variable.tags)
    if completer is not None:
        try:
            response = completer.complete(
                CompletionRequest(
                    PromptKind.SCOPE_INFERENCE,
                    {
                        "name": variable.name,
                        "description": variable.description,
                        "tags": list(variable.tags),
                        "content": variable.content[:500],
                    },
                )
            )
            always_on = bool(response.get("alwaysOn", False))
            raw = response.get("triggerKeywords", [])
            if isinstance(raw, list):
                triggers = tuple(k for k in raw if isinstance(k, str) and k.strip())
        except ProviderFailure:
            always_on = False
            triggers = tuple(variable.tags)

    content_embedding = embedder.embed_one(
        f"{variable.metadata_text()} {variable.content[:500]}"
    )
    hype_embeddings = tuple(embedder.embed(queries)) if queries else ()

    return replace(
        variable,
        headings=parse_headings(variable.content),
        hype_queries=tuple(queries),
        always_on=always_on,
        trigger_keywords=triggers,
        content_embedding=content_embedding,
        hype_embeddings=hype_embeddings,
    )


def rehydrate_variable(data: dict[str, Any], embedder) -> GovernanceVariable:
    """Rebuilds a persisted variable without touching providers.

    Enrichment outputs (queries, scope, triggers) are taken from the saved
    record; only the derived embeddings and headings are recomputed, so a
    restore never depends on a completion provider being configured.
    """
    variable = GovernanceVariable(
        id=data["id"],
        org_id=data["orgId"],
        name=data["name"],
        content=data["content"],
        description=data.get("description", ""),
        tags=tuple(data.get("tags") or ()),
        hype_queries=tuple(data.get("hypeQueries") or ()),
        always_on=bool(data.get("alwaysOn", False)),
        trigger_keywords=tuple(data.get("triggerKeywords") or ()),
        visibility=data.get("visibility", "organization"),
        access_level=data.get("accessLevel", "editable"),
        version=int(data.get("version", 1)),
    )
    queries = list(variable.hype_queries)
    return replace(
        variable,
        headings=parse_headings(variable.content),
        content_embedding=embedder.embed_one(
            f"{variable.metadata_text()} {variable.content[:500]}"
        ),
        hype_embeddings=tuple(embedder.embed(queries)) if queries else (),
    )


class VariableLibrary:
    """Org-partitioned variable registry. Writes serialize; reads copy."""

    def __init__(self, embedder, completer=None):
        self.embedder = embedder
        self.completer = completer
        self._orgs: dict[str, dict[str, GovernanceVariable]] = {}
        self._lock = threading.Lock()

    def add(self, variable: GovernanceVariable) -> GovernanceVariable:
        enriched = enrich_variable(variable, self.completer, self.embedder)
        with self._lock:
            self._orgs.setdefault(enriched.org_id, {})[enriched.id] = enriched
        return enriched

    def put_raw(self, variable: GovernanceVariable) -> GovernanceVariable:
        """Inserts an already-enriched variable (restore path)."""
        with self._lock:
            self._orgs.setdefault(variable.org_id, {})[variable.id] = variable
        return variable

    def update(self, org_id: str, var_id: str, **changes: Any) -> GovernanceVariable:
        """Applies field changes, re-enriches, and bumps the version."""
        with self._lock:
            current = self._orgs.get(org_id, {}).get(var_id)
            if current is None:
                raise KeyError(var_id)
        draft = replace(current, **changes)
        enriched = enrich_variable(draft, self.completer, self.embedder)
        enriched = replace(enriched, version=current.version + 1)
        with self._lock:
            self._orgs[org_id][var_id] = enriched
        return enriched

    def remove(self, org_id: str, var_id: str) -> bool:
        with self._lock:
            return self._orgs.get(org_id, {}).pop(var_id, None) is not None

    def get(self, org_id: str, var_id: str) -> GovernanceVariable | None:
        with self._lock:
            return self._orgs.get(org_id, {}).get(var_id)

    def list(self, org_id: str) -> list[GovernanceVariable]:
        with self._lock:
            return sorted(self._orgs.get(org_id, {}).values(), key=lambda v: v.id)

    def size(self, org_id: str) -> int:
        with self._lock:
            return len(self._orgs.get(org_id, {}))


@dataclass(frozen=True)
class CriticalItem:
    variable_id: str
    mode: str  # "full" | "section"
    section_titles: tuple[str, ...] | None
    resolved_text: str

    def to_json(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "variableId": self.variable_id,
            "mode": self.mode,
            "resolvedText": self.resolved_text,
        }
        if self.section_titles is not None:
            data["sectionTitles"] = list(self.section_titles)
        return data


@dataclass(frozen=True)
class SupplementaryItem:
    variable_id: str
    reason: str

    def to_json(self) -> dict[str, Any]:
        return {"variableId": self.variable_id, "reason": self.reason}


@dataclass(frozen=True)
class RoutedContext:
    critical: tuple[CriticalItem, ...]
    supplementary: tuple[SupplementaryItem, ...]
    mode: str  # "fast" | "full"
    token_count: int

    def to_json(self) -> dict[str, Any]:
        return {
            "critical": [item.to_json() for item in self.critical],
            "supplementary": [item.to_json() for item in self.supplementary],
            "mode": self.mode,
            "tokenCount": self.token_count,
        }


@dataclass
class SessionState:
    session_id: str
    org_id: str
    delivered: dict[str, set[str]] = field(default_factory=dict)
    created_at: datetime | None = None
    last_touched: datetime | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class SessionStore:
    """In-process session registry with TTL sweeping."""

    def __init__(self, config: EngineConfig, clock: Clock | None = None):
        self.config = config
        self.clock = clock or Clock()
        self._sessions: dict[str, SessionState] = {}
        self._lock = threading.Lock()

    def _expired(self, session: SessionState, now: datetime) -> bool:
        ttl = timedelta(hours=self.config.session_ttl_hours)
        return session.last_touched is not None and now - session.last_touched > ttl

    def get(self, session_id: str) -> SessionState | None:
        now = self.clock.now()
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                return None
            if self._expired(session, now):
                del self._sessions[session_id]
                return None
            return session

    def get_or_create(self, session_id: str, org_id: str) -> SessionState:
        now = self.clock.now()
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None and not self._expired(session, now):
                if session.org_id != org_id:
                    raise ForeignSession(session_id)
                return session
            session = SessionState(
                session_id=session_id,
                org_id=org_id,
                created_at=now,
                last_touched=now,
            )
            self._sessions[session_id] = session
            return session

    def drop(self, session_id: str, org_id: str | None = None) -> bool:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                return False
            if org_id is not None and session.org_id != org_id:
                return False
            del self._sessions[session_id]
            return True

    def sweep(self) -> int:
        now = self.clock.now()
        with self._lock:
            dead = [
                sid for sid, s in self._sessions.items() if self._expired(s, now)
            ]
            for sid in dead:
                del self._sessions[sid]
            return len(dead)


def _clamp01(x: float) -> float:
    return max(0.0, min(1.0, x))


def _tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def _best_cosine(task_vec: np.ndarray, variable: GovernanceVariable) -> float | None:
    vectors = []
    if variable.content_embedding is not None:
        vectors.append(variable.content_embedding)
    vectors.extend(variable.hype_embeddings)
    if not vectors:
        return None
    return max(cosine(task_vec, v) for v in vectors)


def score_variable(
    task: str,
    task_vec: np.ndarray,
    variable: GovernanceVariable,
    config: EngineConfig,
) -> float:
    """Composite relevance in [0, 1]: embeddings, keyword overlap, triggers."""
    emb = _best_cosine(task_vec, variable)
    emb = 0.0 if emb is None else max(0.0, emb)
    meta = " ".join(
        [variable.metadata_text()]
        + list(variable.trigger_keywords)
        + list(variable.hype_queries)
    )
    overlap = _jaccard(_tokens(task), _tokens(meta))
    task_lower = task.lower()
    boost = (
        config.fast_route_trigger_boost
        if any(k.lower() in task_lower for k in variable.trigger_keywords if k)
        else 0.0
    )
    return _clamp01(
        config.fast_route_embedding_weight * emb
        + config.fast_route_keyword_weight * overlap
        + boost
    )


def critical_cap(library_size: int) -> int:
    return max(2, min(5, math.ceil(library_size / 5)))


@dataclass(frozen=True)
class _Selection:
    """Pre-resolution routing decision for one variable."""

    variable: GovernanceVariable
    mode: str
    section_titles: tuple[str, ...] | None = None


def extract_sections(variable: GovernanceVariable, titles: list[str]) -> str:
    """Requested sections by heading boundaries, document order.

    A section runs from its heading to the next heading of the same or
    higher level. Any title that matches no heading makes the whole
    content the answer. Overlapping requests (a parent and its child
    heading) collapse to a single span.
    """
    content = variable.content
    headings = variable.headings
    spans: list[tuple[int, int]] = []
    for title in titles:
        wanted = title.strip().lower()
        match_index = next(
            (
                i
                for i, (_, heading_title, _) in enumerate(headings)
                if heading_title.strip().lower() == wanted
            ),
            None,
        )
        if match_index is None:
            return content
        level, _, start = headings[match_index]
        end = len(content)
        for next_level, _, next_start in headings[match_index + 1 :]:
            if next_level <= level:
                end = next_start
                break
        spans.append((start, end))
    if not spans:
        return ""
    spans.sort()
    merged = [spans[0]]
    for start, end in spans[1:]:
        last_start, last_end = merged[-1]
        if start <= last_end:
            merged[-1] = (last_start, max(last_end, end))
        else:
            merged.append((start, end))
    return "".join(content[start:end] for start, end in merged)


def embedding_prefilter(
    task: str,
    library: list[GovernanceVariable],
    embedder,
    top_k: int = PREFILTER_TOP_K,
    min_score: float = PREFILTER_MIN_SCORE,
) -> list[GovernanceVariable]:
    """Cheap vector cut before the full-route analysis call.

    Variables without embeddings pass through unconditionally; the rest
    survive by clearing the score floor or landing in the top K.
    """
    if not library:
        return []
    task_vec = embedder.embed_one(task)
    unembedded = []
    scored = []
    for variable in library:
        best = _best_cosine(task_vec, variable)
        if best is None:
            unembedded.append(variable)
        else:
            scored.append((best, variable))
    scored.sort(key=lambda pair: (-pair[0], pair[1].id))
    kept = [
        variable
        for rank, (score, variable) in enumerate(scored)
        if score >= min_score or rank < top_k
    ]
    return kept + sorted(unembedded, key=lambda v: v.id)


def _resolve(selection: _Selection) -> str:
    if selection.mode == "section" and selection.section_titles:
        return extract_sections(selection.variable, list(selection.section_titles))
    return selection.variable.content


def _apply_session(
    selections: list[_Selection],
    supplementary: list[SupplementaryItem],
    mode: str,
    session: SessionState | None,
    clock: Clock,
    ttl_hours: int,
) -> RoutedContext:
    """Resolves text for surviving selections and records the delivery.

    Already-delivered variables drop out; section requests narrow to the
    undelivered titles. Supplementary items are never recorded so they
    stay eligible for later promotion.
    """
    if session is None:
        survivors = selections
        items = [
            CriticalItem(
                variable_id=s.variable.id,
                mode=s.mode,
                section_titles=s.section_titles,
                resolved_text=_resolve(s),
            )
            for s in survivors
        ]
        token_count = sum(estimate_tokens(i.resolved_text) for i in items)
        return RoutedContext(
            critical=tuple(items),
            supplementary=tuple(supplementary),
            mode=mode,
            token_count=token_count,
        )

    now = clock.now()
    if session.last_touched is not None and now - session.last_touched > timedelta(
        hours=ttl_hours
    ):
        raise SessionExpired(session.session_id)

    with session.lock:
        items = []
        for s in selections:
            delivered = session.delivered.get(s.variable.id, set())
            if ALL_SECTIONS in delivered:
                continue
            if s.mode == "section" and s.section_titles:
                remaining = tuple(
                    t for t in s.section_titles if t.lower() not in delivered
                )
                if not remaining:
                    continue
                narrowed = _Selection(s.variable, "section", remaining)
                items.append(
                    CriticalItem(
                        variable_id=s.variable.id,
                        mode="section",
                        section_titles=remaining,
                        resolved_text=_resolve(narrowed),
                    )
                )
                session.delivered.setdefault(s.variable.id, set()).update(
                    t.lower() for t in remaining
                )
            else:
                items.append(
                    CriticalItem(
                        variable_id=s.variable.id,
                        mode=s.mode,
                        section_titles=s.section_titles,
                        resolved_text=_resolve(s),
                    )
                )
                session.delivered.setdefault(s.variable.id, set()).add(ALL_SECTIONS)
        session.last_touched = now

    token_count = sum(estimate_tokens(i.resolved_text) for i in items)
    return RoutedContext(
        critical=tuple(items),
        supplementary=tuple(supplementary),
        mode=mode,
        token_count=token_count,
    )


def fast_route(
    task: str,
    library: list[GovernanceVariable],
    embedder,
    config: EngineConfig,
    session: SessionState | None = None,
    clock: Clock | None = None,
) -> RoutedContext:
    """Pure-arithmetic routing: no completion calls on this path."""
    if not library:
        raise EmptyLibrary("fast route needs at least one variable")
    clock = clock or Clock()
    task_vec = embedder.embed_one(task)
    scores = {v.id: score_variable(task, task_vec, v, config) for v in library}

    always = sorted(
        (v for v in library if v.always_on), key=lambda v: (-scores[v.id], v.id)
    )
    ranked = sorted(
        (v for v in library if not v.always_on),
        key=lambda v: (-scores[v.id], v.id),
    )
    cap = critical_cap(len(library))
    eligible = [v for v in ranked if scores[v.id] >= config.fast_route_critical_cutoff]
    critical_vars = always + eligible[:cap]
    critical_ids = {v.id for v in critical_vars}

    leftovers = [v for v in ranked if v.id not in critical_ids]
    supplementary = [
        SupplementaryItem(
            variable_id=v.id,
            reason=(
                "overCap"
                if scores[v.id] >= config.fast_route_critical_cutoff
                else "belowCutoff"
            ),
        )
        for v in leftovers[:5]
    ]

    selections = [_Selection(v, "full") for v in critical_vars]
    return _apply_session(
        selections, supplementary, "fast", session, clock, config.session_ttl_hours
    )


def full_route(
    task: str,
    library: list[GovernanceVariable],
    embedder,
    completer,
    config: EngineConfig,
    session: SessionState | None = None,
    clock: Clock | None = None,
) -> RoutedContext:
    """Provider-guided routing with section-level extraction.

    Provider failure degrades to the fast path and the result says so in
    its mode field.
    """
    if not library:
        raise EmptyLibrary("full route needs at least one variable")
    clock = clock or Clock()
    if completer is None:
        return fast_route(task, library, embedder, config, session, clock)

    candidates = embedding_prefilter(task, library, embedder)
    by_id = {v.id: v for v in candidates}
    payload = {
        "task": task,
        "variables": [
            {
                "id": v.id,
                "name": v.name,
                "description": v.description,
                "tags": list(v.tags),
                "headings": [title for _, title, _ in v.headings],
            }
            for v in candidates
        ],
    }
    try:
        response = completer.complete(
            CompletionRequest(PromptKind.FULL_ROUTE_ANALYSIS, payload)
        )
    except ProviderFailure:
        return fast_route(task, library, embedder, config, session, clock)

    critical_selections: list[_Selection] = []
    supplementary: list[SupplementaryItem] = []
    for raw in response.get("selections", []):
        if not isinstance(raw, dict):
            continue
        variable = by_id.get(raw.get("variableId"))
        if variable is None:
            continue
        priority = raw.get("priority")
        if priority == "critical":
            mode = raw.get("mode", "full")
            sections = raw.get("sections") or []
            if mode == "section" and sections:
                critical_selections.append(
                    _Selection(variable, "section", tuple(sections))
                )
            else:
                critical_selections.append(_Selection(variable, "full"))
        elif priority == "supplementary":
            supplementary.append(
                SupplementaryItem(
                    variable_id=variable.id,
                    reason=raw.get("reasoning") or "analysis",
                )
            )

    if not critical_selections and supplementary:
        promoted, supplementary = supplementary[:2], supplementary[2:]
        for item in promoted:
            critical_selections.append(_Selection(by_id[item.variable_id], "full"))

    return _apply_session(
        critical_selections,
        supplementary,
        "full",
        session,
        clock,
        config.session_ttl_hours,
    )


def deliver_delta(
    routed: RoutedContext,
    session: SessionState,
    library: VariableLibrary,
    config: EngineConfig,
    clock: Clock | None = None,
) -> RoutedContext:
    """Filters an assembled context against what the session already got."""
    clock = clock or Clock()
    selections = []
    for item in routed.critical:
        variable = library.get(session.org_id, item.variable_id)
        if variable is None:
            continue
        selections.append(_Selection(variable, item.mode, item.section_titles))
    return _apply_session(
        selections,
        list(routed.supplementary),
        routed.mode,
        session,
        clock,
        config.session_ttl_hours,
    )


class GovernanceRouter:
    """Front door: mode dispatch, session bookkeeping, context assembly."""

    def __init__(
        self,
        library: VariableLibrary,
        embedder,
        completer=None,
        config: EngineConfig | None = None,
        clock: Clock | None = None,
    ):
        self.library = library
        self.embedder = embedder
        self.completer = completer
        self.config = config or EngineConfig()
        self.clock = clock or Clock()
        self.sessions = SessionStore(self.config, self.clock)

    FULL_MODE_MAX_LIBRARY = 15

    def resolve_mode(self, org_id: str, mode: str) -> str:
        if mode != "auto":
            return mode
        small = self.library.size(org_id) <= self.FULL_MODE_MAX_LIBRARY
        return "full" if small and self.completer is not None else "fast"

    def route(
        self,
        task: str,
        org_id: str,
        session_id: str | None = None,
        mode: str = "auto",
    ) -> RoutedContext:
        variables = self.library.list(org_id)
        session = (
            self.sessions.get_or_create(session_id, org_id) if session_id else None
        )
        resolved = self.resolve_mode(org_id, mode)
        if resolved == "full":
            return full_route(
                task,
                variables,
                self.embedder,
                self.completer,
                self.config,
                session,
                self.clock,
            )
        return fast_route(
            task, variables, self.embedder, self.config, session, self.clock
        )

    def compile_context(self, routed: RoutedContext, org_id: str) -> str:
        """Critical items as one delimited text block for prompt injection."""
        blocks = []
        for item in routed.critical:
            variable = self.library.get(org_id, item.variable_id)
            name = variable.name if variable else item.variable_id
            version = variable.version if variable else 0
            blocks.append(f"--- [{name}] (v{version}) ---\n{item.resolved_text}")
        return "\n\n".join(blocks)
