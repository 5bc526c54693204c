"""Shared data model: memory entries, CRM keys, engine configuration.

Every other module builds on the types here. Entries are immutable value
objects; the canonical wire form is one JSON object per entry with
camelCase field names and absent optionals omitted.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from typing import Any

MEMORY = "memory"
PROPERTY_VALUE = "property_value"

CONTENT_HASH_PREFIX = 1000


class EmptyKeys(ValueError):
    """Raised when entity resolution is attempted with no key fields."""


class InvalidEntry(ValueError):
    """Raised when a MemoryEntry violates a model invariant."""


class InvalidConfig(ValueError):
    """Raised when an EngineConfig violates a threshold constraint."""


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def iso(dt: datetime) -> str:
    """UTC ISO-8601 instant with second precision."""
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso(value: str) -> datetime:
    dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


class Clock:
    """Time source. Injectable so pipelines can be replayed deterministically."""

    def now(self) -> datetime:
        return utcnow()

    def now_iso(self) -> str:
        return iso(self.now())


class ManualClock(Clock):
    """Clock pinned to an explicit instant; used by tests and the eval harness."""

    def __init__(self, start: datetime | str):
        self._now = parse_iso(start) if isinstance(start, str) else start

    def now(self) -> datetime:
        return self._now

    def set(self, instant: datetime | str) -> None:
        self._now = parse_iso(instant) if isinstance(instant, str) else instant

    def advance(self, seconds: float) -> None:
        from datetime import timedelta

        self._now = self._now + timedelta(seconds=seconds)


def content_hash(text: str) -> str:
    """Lowercase hex SHA-256 of the first 1000 characters of the source text."""
    prefix = text[:CONTENT_HASH_PREFIX]
    return hashlib.sha256(prefix.encode("utf-8")).hexdigest()


_CAMEL_RE = re.compile(r"_([a-z])")


def _camel(name: str) -> str:
    return _CAMEL_RE.sub(lambda m: m.group(1).upper(), name)


_SNAKE_RE = re.compile(r"([a-z0-9])([A-Z])")


def _snake(name: str) -> str:
    return _SNAKE_RE.sub(r"\1_\2", name).lower()


@dataclass(frozen=True)
class MemoryEntry:
    """Unified record for open-set facts and schema-enforced property values.

    ``type`` discriminates the two shapes: property entries must carry
    property_id, property_name, property_value and confidence; plain memory
    entries must carry none of the property fields.
    """

    id: str
    text: str
    org_id: str
    type: str = MEMORY
    record_id: str | None = None
    keywords: tuple[str, ...] = ()
    persons: tuple[str, ...] = ()
    entities: tuple[str, ...] = ()
    location: str | None = None
    topic: str | None = None
    timestamp: str | None = None
    custom_attributes: dict[str, Any] = field(default_factory=dict)
    source: str = "unknown"
    score: float | None = None
    created_at: str = ""
    updated_at: str = ""
    property_id: str | None = None
    property_name: str | None = None
    system_name: str | None = None
    property_value: str | None = None
    collection_id: str | None = None
    confidence: float | None = None
    provenance: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if not self.org_id:
            raise InvalidEntry("orgId must be non-empty")
        if self.type not in (MEMORY, PROPERTY_VALUE):
            raise InvalidEntry(f"unknown entry type {self.type!r}")
        prop_fields = {
            "propertyId": self.property_id,
            "propertyName": self.property_name,
            "propertyValue": self.property_value,
            "confidence": self.confidence,
        }
        if self.type == PROPERTY_VALUE:
            missing = [k for k, v in prop_fields.items() if v is None]
            if missing:
                raise InvalidEntry(f"property_value entry missing {missing}")
        else:
            extras = [
                k
                for k, v in {
                    **prop_fields,
                    "systemName": self.system_name,
                    "collectionId": self.collection_id,
                }.items()
                if v is not None
            ]
            if extras:
                raise InvalidEntry(f"memory entry carries property fields {extras}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise InvalidEntry(f"confidence {self.confidence} outside [0, 1]")
        if self.provenance is not None:
            idx = self.provenance.get("chunkIndex")
            total = self.provenance.get("chunkTotal")
            if idx is not None and total is not None and not 0 <= idx < total:
                raise InvalidEntry(f"chunkIndex {idx} outside [0, {total})")

    def age_reference(self) -> str | None:
        """Instant used for recency ranking: temporal anchor, else createdAt."""
        return self.timestamp or self.created_at or None

    def with_score(self, score: float) -> "MemoryEntry":
        return replace(self, score=score)

    def to_json(self) -> dict[str, Any]:
        """Canonical wire form: camelCase keys, absent optionals omitted."""
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = list(value)
            out[_camel(f.name)] = value
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "MemoryEntry":
        kwargs: dict[str, Any] = {}
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            name = _snake(key)
            if name not in known:
                continue
            if name in ("keywords", "persons", "entities"):
                value = tuple(value)
            kwargs[name] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class CRMKeys:
    """Identity handles for resolving an entity within an organization."""

    record_id: str | None = None
    email: str | None = None
    website_url: str | None = None
    phone_number: str | None = None
    custom_identifiers: dict[str, str] | None = None

    def is_empty(self) -> bool:
        return not (
            self.record_id
            or self.email
            or self.website_url
            or self.phone_number
            or self.custom_identifiers
        )

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                out[_camel(f.name)] = value
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "CRMKeys":
        known = {f.name for f in fields(cls)}
        return cls(**{_snake(k): v for k, v in data.items() if _snake(k) in known})


def normalize_email(value: str) -> str:
    return value.strip().lower()


_HOST_RE = re.compile(r"^(?:[a-z][a-z0-9+.-]*://)?(?:www\.)?([^/?#]+)", re.IGNORECASE)


def normalize_website(value: str) -> str:
    """Host component, scheme and trailing slash stripped, lowercased."""
    m = _HOST_RE.match(value.strip())
    host = m.group(1) if m else value.strip()
    return host.rstrip("/").lower()


def normalize_phone(value: str) -> str:
    return re.sub(r"\D", "", value)


def resolve_entity(keys: CRMKeys, store, org_id: str) -> str | None:
    """Map CRM keys to a canonical recordId against the store's entity registry.

    Match priority: recordId exact, then email (case-insensitive), websiteUrl
    (normalized host), phoneNumber (digits only), customIdentifiers (exact per
    key). First hit wins; multiple custom-identifier hits are reported via the
    store's multiplicity log and the first (registry order) returned.
    """
    if keys.is_empty():
        raise EmptyKeys("at least one CRM key field is required")
    registry = store.entity_registry(org_id)
    if keys.record_id is not None:
        if keys.record_id in registry:
            return keys.record_id
    if keys.email is not None:
        needle = normalize_email(keys.email)
        for rid, known in registry.items():
            if known.email is not None and normalize_email(known.email) == needle:
                return rid
    if keys.website_url is not None:
        needle = normalize_website(keys.website_url)
        for rid, known in registry.items():
            if known.website_url is not None and normalize_website(known.website_url) == needle:
                return rid
    if keys.phone_number is not None:
        needle = normalize_phone(keys.phone_number)
        for rid, known in registry.items():
            if known.phone_number is not None and normalize_phone(known.phone_number) == needle:
                return rid
    if keys.custom_identifiers:
        hits = []
        for rid, known in registry.items():
            if not known.custom_identifiers:
                continue
            for name, value in keys.custom_identifiers.items():
                if known.custom_identifiers.get(name) == value:
                    hits.append(rid)
                    break
        if hits:
            if len(hits) > 1:
                store.note_ambiguous_match(org_id, keys, hits)
            return hits[0]
    return None


@dataclass(frozen=True)
class EngineConfig:
    """Global tuning knobs. Thresholds are validated at construction."""

    write_dedup_threshold: float = 0.92
    consolidation_merge_threshold: float = 0.95
    consolidation_min_org_memories: int = 10
    retention_days: int = 365
    reflection_max_rounds: int = 2
    completeness_temperature: float = 0.1
    followup_temperature: float = 0.3
    recency_half_life_days: float = 38.0
    session_ttl_hours: int = 24
    property_select_min_score: float = 0.35
    property_select_max_count: int = 25
    fast_route_embedding_weight: float = 0.65
    fast_route_keyword_weight: float = 0.35
    fast_route_trigger_boost: float = 0.15
    fast_route_critical_cutoff: float = 0.55
    token_chars_per_token: int = 4
    embedding_dim: int = 256

    def __post_init__(self) -> None:
        if self.consolidation_merge_threshold <= self.write_dedup_threshold:
            raise InvalidConfig(
                "consolidationMergeThreshold must exceed writeDedupThreshold "
                f"({self.consolidation_merge_threshold} <= {self.write_dedup_threshold})"
            )
        for name in (
            "write_dedup_threshold",
            "consolidation_merge_threshold",
            "fast_route_critical_cutoff",
            "property_select_min_score",
        ):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise InvalidConfig(f"{_camel(name)} {value} outside (0, 1]")
        if self.token_chars_per_token < 1:
            raise InvalidConfig("tokenCharsPerToken must be >= 1")
        if self.embedding_dim < 1:
            raise InvalidConfig("embeddingDim must be >= 1")

    def to_json(self) -> dict[str, Any]:
        return {_camel(f.name): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = _snake(key)
            if name in known:
                kwargs[name] = value
        return cls(**kwargs)


def estimate_tokens(text: str, chars_per_token: int = 4) -> int:
    """Deterministic token estimate: ceil(characters / divisor)."""
    if not text:
        return 0
    return math.ceil(len(text) / chars_per_token)


def deterministic_id(*parts: str, prefix: str = "m") -> str:
    """Content-derived id so replays with identical inputs yield identical ids."""
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()
    return f"{prefix}-{digest[:16]}"
