"""Background merge-and-prune job over one org partition.

Near-duplicate open-set memories merge at a threshold deliberately higher
than the write-side dedup cutoff, stale memories beyond the retention
window are pruned with sole-memory protection, small orgs are skipped
outright, and a dry-run mode reports every decision without touching the
store. Property values are never merged or pruned by this job.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import timedelta
from typing import Any

import numpy as np

from .core import MEMORY, Clock, EngineConfig, MemoryEntry, parse_iso
from .store import MemoryStore, StoredVector

logger = logging.getLogger(__name__)

SKIP_BELOW_MIN_COUNT = "belowMinCount"

# Scheduler default: storage compaction runs this long after a
# consolidation pass. The operation itself is callable on demand.
COMPACTION_DELAY_SECONDS = 3600


@dataclass
class ConsolidationReport:
    org_id: str
    dry_run: bool = False
    merged: list[tuple[str, list[str]]] = field(default_factory=list)
    pruned: list[str] = field(default_factory=list)
    protected: list[str] = field(default_factory=list)
    skipped_reason: str | None = None
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "orgId": self.org_id,
            "dryRun": self.dry_run,
            "merged": [
                {"survivorId": survivor, "absorbedIds": absorbed}
                for survivor, absorbed in self.merged
            ],
            "pruned": self.pruned,
            "protected": self.protected,
            "skippedReason": self.skipped_reason,
            "errors": self.errors,
        }


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _created_ts(entry: MemoryEntry) -> float:
    try:
        return parse_iso(entry.created_at).timestamp()
    except (ValueError, TypeError):
        return 0.0


def _survivor_order(sv: StoredVector) -> tuple[float, str]:
    # Most recent createdAt first; ties resolved by ascending id.
    return (-_created_ts(sv.entry), sv.entry_id)


def _merge_groups(
    group: list[StoredVector], threshold: float
) -> list[tuple[StoredVector, list[StoredVector]]]:
    """Connected components of the strict-above-threshold similarity graph."""
    if len(group) < 2:
        return []
    group = sorted(group, key=lambda sv: sv.entry_id)
    matrix = np.stack([sv.vector for sv in group])
    sims = matrix @ matrix.T
    uf = _UnionFind(len(group))
    for i in range(len(group)):
        for j in range(i + 1, len(group)):
            if float(sims[i, j]) > threshold:
                uf.union(i, j)
    components: dict[int, list[StoredVector]] = {}
    for i, sv in enumerate(group):
        components.setdefault(uf.find(i), []).append(sv)
    merges = []
    for members in components.values():
        if len(members) < 2:
            continue
        members = sorted(members, key=_survivor_order)
        merges.append((members[0], members[1:]))
    merges.sort(key=lambda pair: pair[0].entry_id)
    return merges


def consolidate(
    store: MemoryStore,
    org_id: str,
    config: EngineConfig,
    dry_run: bool = False,
    clock: Clock | None = None,
) -> ConsolidationReport:
    """One merge-and-prune pass over an org's open-set memories.

    Merge groups form within a single recordId scope only (never across
    entities); the survivor is the most recent entry and absorbs the
    others' keyword/person/entity metadata with lineage recorded in
    customAttributes. Pruning removes memories older than the retention
    window but always leaves each scope at least its newest memory.
    """
    clock = clock or Clock()
    now = clock.now()
    report = ConsolidationReport(org_id=org_id, dry_run=dry_run)

    memories = store.entries(org_id, memory_type=MEMORY)
    if len(memories) < config.consolidation_min_org_memories:
        report.skipped_reason = SKIP_BELOW_MIN_COUNT
        return report

    scopes: dict[str | None, list[StoredVector]] = {}
    for sv in memories:
        scopes.setdefault(sv.record_id, []).append(sv)

    absorbed_ids: set[str] = set()
    survivors: dict[str, MemoryEntry] = {}
    for scope_id in sorted(scopes, key=lambda s: (s is None, s or "")):
        for survivor, absorbed in _merge_groups(
            scopes[scope_id], config.consolidation_merge_threshold
        ):
            entry = survivor.entry
            keywords = list(entry.keywords)
            persons = list(entry.persons)
            entities = list(entry.entities)
            lineage = list(entry.custom_attributes.get("mergedFrom", []))
            for sv in absorbed:
                absorbed_ids.add(sv.entry_id)
                lineage.append(sv.entry_id)
                lineage.extend(sv.entry.custom_attributes.get("mergedFrom", []))
                for word in sv.entry.keywords:
                    if word not in keywords:
                        keywords.append(word)
                for person in sv.entry.persons:
                    if person not in persons:
                        persons.append(person)
                for ent in sv.entry.entities:
                    if ent not in entities:
                        entities.append(ent)
            attrs = dict(entry.custom_attributes)
            attrs["mergedFrom"] = sorted(set(lineage))
            survivors[survivor.entry_id] = replace(
                entry,
                keywords=tuple(keywords),
                persons=tuple(persons),
                entities=tuple(entities),
                custom_attributes=attrs,
                updated_at=clock.now_iso(),
            )
            report.merged.append(
                (survivor.entry_id, sorted(sv.entry_id for sv in absorbed))
            )

    cutoff = now - timedelta(days=config.retention_days)
    cutoff_ts = cutoff.timestamp()
    prune_ids: set[str] = set()
    for scope_id in sorted(scopes, key=lambda s: (s is None, s or "")):
        remaining = [
            sv for sv in scopes[scope_id] if sv.entry_id not in absorbed_ids
        ]
        stale = [sv for sv in remaining if _created_ts(sv.entry) < cutoff_ts]
        if not stale:
            continue
        if len(stale) == len(remaining):
            keep = min(remaining, key=_survivor_order)
            report.protected.append(keep.entry_id)
            stale = [sv for sv in stale if sv.entry_id != keep.entry_id]
        prune_ids.update(sv.entry_id for sv in stale)
    report.pruned = sorted(prune_ids)

    if dry_run:
        return report

    for entry_id, entry in sorted(survivors.items()):
        try:
            stored = next(sv for sv in memories if sv.entry_id == entry_id)
            store.upsert(entry, stored.vector)
        except Exception as exc:
            report.errors.append(f"merge update {entry_id}: {exc}")
            logger.warning("merge update failed for %s: %s", entry_id, exc)
    for entry_id in sorted(absorbed_ids | prune_ids):
        try:
            store.delete(org_id, entry_id)
        except Exception as exc:
            report.errors.append(f"delete {entry_id}: {exc}")
            logger.warning("delete failed for %s: %s", entry_id, exc)
    return report


def compact(store: MemoryStore, org_id: str) -> dict[str, int]:
    """Rewrites the org's persistence log to snapshot form."""
    return store.compact(org_id)
