"""Organization-partitioned vector store with entity-scoped filtering.

Search is an exact cosine scan: desk-scale partitions make exhaustive
scanning both correct and fast, and the interface is narrow enough that an
ANN backend could replace it without contract changes. Persistence is an
append-only JSONL log per organization with snapshot compaction; vectors
are re-derived from entry text on restore (embedding providers are
deterministic by contract).
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core import (
    MEMORY,
    PROPERTY_VALUE,
    CRMKeys,
    MemoryEntry,
    parse_iso,
    resolve_entity,
)
from .providers import EmbeddingProvider

logger = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class MissingOrgId(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalFilter:
    """Metadata constraints applied around the vector scan.

    ``record_id`` (a recordId string or CRMKeys) is a hard pre-filter;
    everything else post-filters the ranked candidates. Timestamp range is a
    closed interval.
    """

    record_id: str | CRMKeys | None = None
    persons: tuple[str, ...] | None = None
    entities: tuple[str, ...] | None = None
    location: str | None = None
    timestamp_from: str | None = None
    timestamp_to: str | None = None
    memory_type: str = "both"

    def __post_init__(self) -> None:
        if self.timestamp_from and self.timestamp_to:
            if parse_iso(self.timestamp_from) > parse_iso(self.timestamp_to):
                raise ValueError("timestampFrom must not exceed timestampTo")
        if self.memory_type not in (MEMORY, PROPERTY_VALUE, "both"):
            raise ValueError(f"unknown memoryType {self.memory_type!r}")

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "RetrievalFilter":
        record_id = data.get("recordId")
        if isinstance(record_id, dict):
            record_id = CRMKeys.from_json(record_id)
        return cls(
            record_id=record_id,
            persons=tuple(data["persons"]) if data.get("persons") else None,
            entities=tuple(data["entities"]) if data.get("entities") else None,
            location=data.get("location"),
            timestamp_from=data.get("timestampFrom"),
            timestamp_to=data.get("timestampTo"),
            memory_type=data.get("memoryType", "both"),
        )


@dataclass
class StoredVector:
    entry_id: str
    org_id: str
    vector: np.ndarray
    entry: MemoryEntry
    record_id: str | None = None


@dataclass
class _OrgPartition:
    entries: dict[str, StoredVector] = field(default_factory=dict)
    crm_registry: dict[str, CRMKeys] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock)


def _sort_key(sim: float, entry: MemoryEntry):
    # Rank: similarity desc, createdAt desc, id asc. Similarity is rounded
    # so sub-1e-12 float noise (which varies with BLAS evaluation order)
    # falls through to the deterministic tie-break.
    return (-round(sim, 12), _desc_instant(entry.created_at), entry.id)


def _desc_instant(value: str) -> float:
    if not value:
        return 0.0
    try:
        return -parse_iso(value).timestamp()
    except ValueError:
        return 0.0


class MemoryStore:
    """In-memory flat vector store with optional write-through JSONL logging."""

    def __init__(
        self,
        dim: int,
        root: str | Path | None = None,
        embedder: EmbeddingProvider | None = None,
    ):
        self._dim = dim
        self._root = Path(root) if root is not None else None
        self._embedder = embedder
        self._orgs: dict[str, _OrgPartition] = {}
        self._registry_lock = threading.Lock()
        self.ambiguous_matches: list[tuple[str, CRMKeys, list[str]]] = []
        self.restore_warnings: int = 0

    # -- partition plumbing ------------------------------------------------

    def _org(self, org_id: str) -> _OrgPartition:
        with self._registry_lock:
            part = self._orgs.get(org_id)
            if part is None:
                part = _OrgPartition()
                self._orgs[org_id] = part
            return part

    def org_ids(self) -> list[str]:
        with self._registry_lock:
            return sorted(self._orgs)

    def entity_registry(self, org_id: str) -> dict[str, CRMKeys]:
        return self._org(org_id).crm_registry

    def register_entity(self, org_id: str, keys: CRMKeys) -> None:
        if not keys.record_id:
            raise ValueError("entity registration requires a recordId")
        part = self._org(org_id)
        with part.lock:
            part.crm_registry[keys.record_id] = keys
            if self._root is not None:
                self._append_line(org_id, {"_kind": "entity", "keys": keys.to_json()})

    def note_ambiguous_match(self, org_id: str, keys: CRMKeys, hits: list[str]) -> None:
        logger.warning("custom identifier matched %d entities in %s", len(hits), org_id)
        self.ambiguous_matches.append((org_id, keys, hits))

    # -- writes ------------------------------------------------------------

    def upsert(self, entry: MemoryEntry, vector: np.ndarray) -> str:
        if not entry.org_id:
            raise MissingOrgId("entry missing orgId")
        if vector.shape != (self._dim,):
            raise DimensionMismatch(f"expected dim {self._dim}, got {vector.shape}")
        part = self._org(entry.org_id)
        with part.lock:
            part.entries[entry.id] = StoredVector(
                entry_id=entry.id,
                org_id=entry.org_id,
                vector=np.asarray(vector, dtype=np.float64),
                entry=entry,
                record_id=entry.record_id,
            )
            if self._root is not None:
                self._append_line(entry.org_id, entry.to_json())
        return entry.id

    def delete(self, org_id: str, entry_id: str) -> bool:
        part = self._org(org_id)
        with part.lock:
            existed = part.entries.pop(entry_id, None) is not None
            if existed and self._root is not None:
                self._append_line(org_id, {"_kind": "tombstone", "id": entry_id})
        return existed

    # -- reads -------------------------------------------------------------

    def get(self, org_id: str, entry_id: str) -> MemoryEntry | None:
        stored = self._org(org_id).entries.get(entry_id)
        return stored.entry if stored else None

    def entries(self, org_id: str, memory_type: str = "both") -> list[StoredVector]:
        part = self._org(org_id)
        with part.lock:
            out = list(part.entries.values())
        if memory_type != "both":
            out = [s for s in out if s.entry.type == memory_type]
        return out

    def count(self, org_id: str, memory_type: str = "both") -> int:
        return len(self.entries(org_id, memory_type))

    def _resolve_filter_record(self, org_id: str, filt: RetrievalFilter) -> tuple[str | None, bool]:
        """Returns (record_id, unresolvable). Unresolvable keys yield no results."""
        if filt.record_id is None:
            return None, False
        if isinstance(filt.record_id, CRMKeys):
            resolved = resolve_entity(filt.record_id, self, org_id)
            return resolved, resolved is None
        return filt.record_id, False

    @staticmethod
    def _passes_metadata(entry: MemoryEntry, filt: RetrievalFilter) -> bool:
        if filt.memory_type != "both" and entry.type != filt.memory_type:
            return False
        if filt.persons and not set(p.lower() for p in filt.persons) & set(
            p.lower() for p in entry.persons
        ):
            return False
        if filt.entities and not set(e.lower() for e in filt.entities) & set(
            e.lower() for e in entry.entities
        ):
            return False
        if filt.location and (entry.location or "").lower() != filt.location.lower():
            return False
        if filt.timestamp_from or filt.timestamp_to:
            anchor = entry.timestamp or entry.created_at
            if not anchor:
                return False
            instant = parse_iso(anchor)
            if filt.timestamp_from and instant < parse_iso(filt.timestamp_from):
                return False
            if filt.timestamp_to and instant > parse_iso(filt.timestamp_to):
                return False
        return True

    def search(
        self,
        org_id: str,
        query: np.ndarray,
        k: int,
        filt: RetrievalFilter | None = None,
    ) -> list[tuple[MemoryEntry, float]]:
        """Ranked cosine scan within one org partition.

        An unknown org returns empty: absence of a partition is
        indistinguishable from emptiness by design.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        filt = filt or RetrievalFilter()
        record_id, unresolvable = self._resolve_filter_record(org_id, filt)
        if unresolvable:
            return []
        part = self._org(org_id)
        with part.lock:
            candidates = list(part.entries.values())
        if record_id is not None:
            candidates = [s for s in candidates if s.record_id == record_id]
        if not candidates:
            return []
        matrix = np.stack([s.vector for s in candidates])
        sims = matrix @ np.asarray(query, dtype=np.float64)
        scored = [
            (s.entry, float(sim))
            for s, sim in zip(candidates, sims)
            if self._passes_metadata(s.entry, filt)
        ]
        scored.sort(key=lambda pair: _sort_key(pair[1], pair[0]))
        return scored[:k]

    def nearest_above(
        self,
        org_id: str,
        vector: np.ndarray,
        threshold: float,
        scope: str | None = None,
        memory_type: str | None = None,
    ) -> tuple[str, float] | None:
        """Most similar existing entry strictly above threshold, else None."""
        if not 0.0 < threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        part = self._org(org_id)
        with part.lock:
            candidates = list(part.entries.values())
        if scope is not None:
            candidates = [s for s in candidates if s.record_id == scope]
        if memory_type is not None:
            candidates = [s for s in candidates if s.entry.type == memory_type]
        if not candidates:
            return None
        matrix = np.stack([s.vector for s in candidates])
        sims = matrix @ np.asarray(vector, dtype=np.float64)
        best = None
        for stored, sim in zip(candidates, sims):
            sim = float(sim)
            if sim > threshold and (best is None or sim > best[1]):
                best = (stored.entry_id, sim)
        return best

    # -- persistence -------------------------------------------------------

    def _org_dir(self, org_id: str) -> Path:
        assert self._root is not None
        d = self._root / org_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _append_line(self, org_id: str, record: dict[str, Any]) -> None:
        path = self._org_dir(org_id) / "log.jsonl"
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def persist(self, org_id: str) -> None:
        """Flush the org's log to disk (write-through logging makes this a
        durability barrier rather than a bulk write)."""
        if self._root is None:
            raise RuntimeError("store has no persistence root")
        path = self._org_dir(org_id) / "log.jsonl"
        if not path.exists():
            path.touch()
        with open(path, "a", encoding="utf-8") as f:
            f.flush()
            os.fsync(f.fileno())

    def _embed_text(self, text: str) -> np.ndarray:
        if self._embedder is None:
            raise RuntimeError("restore requires an embedder to rebuild vectors")
        return self._embedder.embed([text])[0]

    def _replay(self, org_id: str, lines: Iterable[str], path_name: str) -> None:
        part = self._org(org_id)
        for n, raw in enumerate(lines, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
                kind = record.get("_kind")
                if kind == "entity":
                    keys = CRMKeys.from_json(record["keys"])
                    part.crm_registry[keys.record_id] = keys
                elif kind == "tombstone":
                    part.entries.pop(record["id"], None)
                else:
                    entry = MemoryEntry.from_json(record)
                    part.entries[entry.id] = StoredVector(
                        entry_id=entry.id,
                        org_id=org_id,
                        vector=self._embed_text(entry.text),
                        entry=entry,
                        record_id=entry.record_id,
                    )
            except (ValueError, KeyError) as exc:
                self.restore_warnings += 1
                logger.warning("skipping corrupt line %d in %s: %s", n, path_name, exc)

    def restore(self, org_id: str) -> int:
        """Replay snapshot then log, last-write-wins per id. Corrupt lines are
        skipped with a warning and recovery continues."""
        if self._root is None:
            raise RuntimeError("store has no persistence root")
        part = self._org(org_id)
        with part.lock:
            part.entries.clear()
            part.crm_registry.clear()
            org_dir = self._root / org_id
            for name in ("snapshot.jsonl", "log.jsonl"):
                path = org_dir / name
                if path.exists():
                    with open(path, encoding="utf-8") as f:
                        self._replay(org_id, f, str(path))
            return len(part.entries)

    def compact(self, org_id: str) -> dict[str, int]:
        """Rewrite persistence to snapshot form: one line per live record."""
        if self._root is None:
            raise RuntimeError("store has no persistence root")
        part = self._org(org_id)
        with part.lock:
            org_dir = self._org_dir(org_id)
            log_path = org_dir / "log.jsonl"
            lines_before = 0
            if log_path.exists():
                with open(log_path, encoding="utf-8") as f:
                    lines_before = sum(1 for line in f if line.strip())
            snapshot_path = org_dir / "snapshot.jsonl"
            records = [
                {"_kind": "entity", "keys": keys.to_json()}
                for _, keys in sorted(part.crm_registry.items())
            ]
            records.extend(
                part.entries[eid].entry.to_json() for eid in sorted(part.entries)
            )
            tmp = snapshot_path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                for record in records:
                    f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
                f.flush()
                os.fsync(f.fileno())
            tmp.replace(snapshot_path)
            with open(log_path, "w", encoding="utf-8") as f:
                f.flush()
                os.fsync(f.fileno())
            return {
                "linesBefore": lines_before,
                "linesAfter": len(records),
                "liveEntries": len(part.entries),
            }

    def stats(self) -> dict[str, Any]:
        out = {}
        for org_id in self.org_ids():
            part = self._org(org_id)
            with part.lock:
                out[org_id] = {
                    "entries": len(part.entries),
                    "memories": sum(
                        1 for s in part.entries.values() if s.entry.type == MEMORY
                    ),
                    "propertyValues": sum(
                        1 for s in part.entries.values() if s.entry.type == PROPERTY_VALUE
                    ),
                    "entitiesRegistered": len(part.crm_registry),
                }
        return out

    def snapshot_hash(self, org_id: str) -> str:
        """Stable digest of the partition's live contents (dry-run checks)."""
        import hashlib

        part = self._org(org_id)
        with part.lock:
            blob = json.dumps(
                [part.entries[eid].entry.to_json() for eid in sorted(part.entries)],
                sort_keys=True,
            )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
