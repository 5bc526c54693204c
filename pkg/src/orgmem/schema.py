"""Property schemas: definition, assisted authoring, refinement, evaluation.

A schema declares the typed properties an organization wants extracted.
Authoring and per-property enhancement delegate drafting to the completion
provider but validate every result locally. Refinement replays extraction,
diagnoses each property, and optimizes only the ones that need it.
Evaluation scores endpoint interactions against weighted rubrics and keeps
the full execution trace even when the judge fails.
"""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

from .core import Clock, deterministic_id, iso, utcnow
from .providers import (
    CompletionProvider,
    CompletionRequest,
    PromptKind,
    ProviderFailure,
)

logger = logging.getLogger(__name__)

PROPERTY_TYPES = ("text", "number", "date", "boolean", "options", "array")
CLASSIFICATIONS = ("extracted", "missed", "low_confidence", "inaccurate", "unavailable")

UPDATE_REPLACE = "replace"
UPDATE_ACCUMULATE = "accumulate"


class InvalidSchema(ValueError):
    pass


class EmptySchema(ValueError):
    pass


class TypeChangeRejected(ValueError):
    pass


@dataclass(frozen=True)
class SchemaProperty:
    id: str
    name: str
    system_name: str
    type: str
    description: str = ""
    extraction_hints: str | None = None
    options: tuple[str, ...] | None = None
    collection_id: str | None = None
    version: int = 1
    update_mode: str = UPDATE_REPLACE

    def __post_init__(self) -> None:
        if self.type not in PROPERTY_TYPES:
            raise InvalidSchema(f"unknown property type {self.type!r}")
        if self.type == "options" and not self.options:
            raise InvalidSchema(f"options property {self.system_name!r} declares no options")
        if self.type != "options" and self.options:
            raise InvalidSchema(f"{self.system_name!r} declares options but is {self.type}")
        if not self.system_name:
            raise InvalidSchema("property requires a systemName")
        if self.update_mode not in (UPDATE_REPLACE, UPDATE_ACCUMULATE):
            raise InvalidSchema(f"unknown update mode {self.update_mode!r}")

    def metadata_text(self) -> str:
        """Text embedded for relevance scoring during property selection."""
        parts = [self.name, self.system_name.replace("_", " "), self.description]
        if self.extraction_hints:
            parts.append(self.extraction_hints)
        if self.options:
            parts.append(" ".join(self.options))
        return " ".join(p for p in parts if p)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "name": self.name,
            "systemName": self.system_name,
            "type": self.type,
            "description": self.description,
            "version": self.version,
            "updateMode": self.update_mode,
        }
        if self.extraction_hints is not None:
            out["extractionHints"] = self.extraction_hints
        if self.options is not None:
            out["options"] = list(self.options)
        if self.collection_id is not None:
            out["collectionId"] = self.collection_id
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "SchemaProperty":
        system_name = data.get("systemName") or data.get("system_name") or ""
        return cls(
            id=data.get("id") or deterministic_id("prop", system_name, prefix="p"),
            name=data.get("name", system_name),
            system_name=system_name,
            type=data.get("type", ""),
            description=data.get("description", ""),
            extraction_hints=data.get("extractionHints"),
            options=tuple(data["options"]) if data.get("options") else None,
            collection_id=data.get("collectionId"),
            version=int(data.get("version", 1)),
            update_mode=data.get("updateMode", UPDATE_REPLACE),
        )


@dataclass(frozen=True)
class Schema:
    id: str
    name: str
    org_id: str
    properties: tuple[SchemaProperty, ...]
    version: int = 1

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for prop in self.properties:
            if prop.system_name in seen:
                raise InvalidSchema(f"duplicate systemName {prop.system_name!r}")
            seen.add(prop.system_name)

    def property_by_id(self, property_id: str) -> SchemaProperty | None:
        for prop in self.properties:
            if prop.id == property_id:
                return prop
        return None

    def property_by_system_name(self, system_name: str) -> SchemaProperty | None:
        for prop in self.properties:
            if prop.system_name == system_name:
                return prop
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "orgId": self.org_id,
            "version": self.version,
            "properties": [p.to_json() for p in self.properties],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Schema":
        return cls(
            id=data["id"],
            name=data.get("name", data["id"]),
            org_id=data.get("orgId", ""),
            version=int(data.get("version", 1)),
            properties=tuple(SchemaProperty.from_json(p) for p in data.get("properties", [])),
        )


# -- typed value validation -------------------------------------------------


def parse_number(value: Any) -> float:
    """Lenient numeric parsing: accepts ints, floats, and formatted strings
    like "$450,000" or "12%". Raises ValueError for anything else."""
    if isinstance(value, bool):
        raise ValueError("boolean is not a number")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        cleaned = value.strip().replace("$", "").replace(",", "").replace("%", "")
        cleaned = cleaned.replace(" ", "")
        if cleaned:
            return float(cleaned)
    raise ValueError(f"not numeric: {value!r}")


def _parse_date(value: Any) -> str:
    from datetime import date, datetime

    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"not a date: {value!r}")
    text = value.strip()
    try:
        # Date-only inputs stay date-only in the rendering.
        return date.fromisoformat(text).isoformat()
    except ValueError:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).isoformat()


def validate_value(prop: SchemaProperty, value: Any) -> tuple[bool, str, str]:
    """Validates a raw extracted value against the declared type.

    Returns (ok, canonical string rendering, rejection reason). Validation is
    strict for option, boolean, and date values; numeric parsing is lenient.
    """
    try:
        if prop.type == "number":
            num = parse_number(value)
            rendered = str(int(num)) if num == int(num) else repr(num)
            return True, rendered, ""
        if prop.type == "boolean":
            if isinstance(value, bool):
                return True, "true" if value else "false", ""
            return False, "", f"expected boolean, got {value!r}"
        if prop.type == "date":
            return True, _parse_date(value), ""
        if prop.type == "options":
            if isinstance(value, str) and value in (prop.options or ()):
                return True, value, ""
            return False, "", f"value {value!r} not in declared options"
        if prop.type == "array":
            if isinstance(value, (list, tuple)):
                return True, json.dumps(list(value), ensure_ascii=False), ""
            return False, "", f"expected array, got {value!r}"
        # text
        if isinstance(value, str) and value.strip():
            return True, value.strip(), ""
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, str(value), ""
        return False, "", f"expected text, got {value!r}"
    except ValueError as exc:
        return False, "", str(exc)


# -- authoring and enhancement ----------------------------------------------


def author_schema(
    intent: str,
    completer: CompletionProvider,
    org_id: str = "",
    name: str = "authored",
) -> tuple[Schema, list[str]]:
    """Drafts a schema from a natural-language intent.

    Every drafted property is validated locally; invalid ones are dropped
    and reported. Raises EmptySchema when nothing valid remains.
    """
    if not intent.strip():
        raise ValueError("intent must be non-empty")
    response = completer.complete(
        CompletionRequest(PromptKind.SCHEMA_AUTHOR, {"intent": intent})
    )
    dropped: list[str] = []
    props: list[SchemaProperty] = []
    seen: set[str] = set()
    for raw in response.get("properties") or []:
        try:
            prop = SchemaProperty.from_json(raw)
        except (InvalidSchema, TypeError) as exc:
            dropped.append(f"{raw.get('systemName', '?')}: {exc}")
            continue
        if prop.system_name in seen:
            dropped.append(f"{prop.system_name}: duplicate systemName")
            continue
        seen.add(prop.system_name)
        props.append(prop)
    if not props:
        raise EmptySchema(f"no valid properties drafted ({len(dropped)} dropped)")
    schema = Schema(
        id=deterministic_id("schema", org_id, intent, prefix="s"),
        name=name,
        org_id=org_id,
        properties=tuple(props),
    )
    return schema, dropped


def enhance_property(
    prop: SchemaProperty,
    feedback: str,
    completer: CompletionProvider,
) -> SchemaProperty:
    """Revises one property from operator feedback.

    Identity (id, systemName) is preserved and type changes are rejected;
    silent type drift would corrupt stored property values. An empty provider
    response leaves the property untouched.
    """
    if not feedback.strip():
        raise ValueError("feedback must be non-empty")
    response = completer.complete(
        CompletionRequest(
            PromptKind.SCHEMA_ENHANCE,
            {"property": prop.to_json(), "feedback": feedback},
        )
    )
    revised = response.get("property")
    if not revised:
        return prop
    new_type = revised.get("type", prop.type)
    if new_type != prop.type:
        raise TypeChangeRejected(
            f"type change {prop.type} -> {new_type} requires explicit migration"
        )
    return replace(
        prop,
        name=revised.get("name", prop.name),
        description=revised.get("description", prop.description),
        extraction_hints=revised.get("extractionHints", prop.extraction_hints),
        options=tuple(revised["options"]) if revised.get("options") else prop.options,
        version=prop.version + 1,
    )


# -- three-phase refinement -------------------------------------------------


@dataclass(frozen=True)
class PropertyDiagnosis:
    property_id: str
    classification: str
    instructions: str = ""

    def __post_init__(self) -> None:
        if self.classification not in CLASSIFICATIONS:
            raise ValueError(f"unknown classification {self.classification!r}")
        if self.classification == "extracted" and self.instructions:
            raise ValueError("extracted diagnosis must carry no instructions")

    def to_json(self) -> dict[str, Any]:
        return {
            "propertyId": self.property_id,
            "classification": self.classification,
            "instructions": self.instructions,
        }


@dataclass
class RefinementResult:
    diagnoses: list[PropertyDiagnosis]
    revised_properties: list[SchemaProperty]
    change_annotations: list[str]
    baseline: Any = None

    def revision_for(self, property_id: str) -> SchemaProperty | None:
        for prop in self.revised_properties:
            if prop.id == property_id:
                return prop
        return None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "diagnoses": [d.to_json() for d in self.diagnoses],
            "revisedProperties": [p.to_json() for p in self.revised_properties],
            "changeAnnotations": list(self.change_annotations),
        }
        if self.baseline is not None:
            render = getattr(self.baseline, "to_json", None)
            out["baseline"] = render() if callable(render) else self.baseline
        return out


def _optimize_one(
    prop: SchemaProperty,
    diagnosis: PropertyDiagnosis,
    sample_content: str,
    completer: CompletionProvider,
) -> tuple[SchemaProperty, str] | None:
    try:
        response = completer.complete(
            CompletionRequest(
                PromptKind.PROPERTY_OPTIMIZE,
                {
                    "property": prop.to_json(),
                    "classification": diagnosis.classification,
                    "instructions": diagnosis.instructions,
                    "sample": sample_content[:2000],
                },
            )
        )
    except ProviderFailure:
        logger.warning("optimization failed for %s; returned unrevised", prop.id)
        return None
    revised = response.get("property")
    if not revised:
        return None
    if revised.get("type", prop.type) != prop.type:
        logger.warning("optimization for %s attempted a type change; rejected", prop.id)
        return None
    annotation = response.get("annotation") or f"definition revised ({diagnosis.classification})"
    return (
        replace(
            prop,
            name=revised.get("name", prop.name),
            description=revised.get("description", prop.description),
            extraction_hints=revised.get("extractionHints", prop.extraction_hints),
            options=tuple(revised["options"]) if revised.get("options") else prop.options,
            version=prop.version + 1,
        ),
        annotation,
    )


def refine_schema(
    schema: Schema,
    sample_content: str,
    completer: CompletionProvider,
    pipeline: Callable[[str, Schema], Any],
    expected: dict[str, Any] | None = None,
    parallel: bool = False,
) -> RefinementResult:
    """Replay, diagnose, optimize.

    Phase 1 replays extraction over the sample. Phase 2 is one completion
    classifying every property. Phase 3 optimizes only properties classified
    as needing work; extracted and unavailable properties pass through
    untouched. Phase-3 failures degrade to the unrevised property.
    """
    if not schema.properties:
        raise EmptySchema("cannot refine an empty schema")

    baseline = pipeline(sample_content, schema)

    payload: dict[str, Any] = {
        "schema": schema.to_json(),
        "baseline": getattr(baseline, "to_json", lambda: baseline)(),
    }
    if expected is not None:
        payload["expected"] = expected
    analysis = completer.complete(
        CompletionRequest(PromptKind.PROPERTY_ANALYSIS, payload)
    )

    by_id: dict[str, PropertyDiagnosis] = {}
    for raw in analysis.get("diagnoses") or []:
        try:
            diag = PropertyDiagnosis(
                property_id=raw["propertyId"],
                classification=raw["classification"],
                instructions=raw.get("instructions", ""),
            )
        except (KeyError, ValueError) as exc:
            logger.warning("discarding malformed diagnosis %r: %s", raw, exc)
            continue
        by_id[diag.property_id] = diag

    diagnoses = [
        by_id.get(p.id, PropertyDiagnosis(p.id, "extracted")) for p in schema.properties
    ]

    todo = [
        (prop, diag)
        for prop, diag in zip(schema.properties, diagnoses)
        if diag.classification not in ("extracted", "unavailable")
    ]

    if parallel and todo:
        with ThreadPoolExecutor(max_workers=min(8, len(todo))) as pool:
            outcomes = list(
                pool.map(
                    lambda pair: _optimize_one(pair[0], pair[1], sample_content, completer),
                    todo,
                )
            )
    else:
        outcomes = [
            _optimize_one(prop, diag, sample_content, completer) for prop, diag in todo
        ]

    revised: list[SchemaProperty] = []
    annotations: list[str] = []
    for outcome in outcomes:
        if outcome is None:
            continue
        revised.append(outcome[0])
        annotations.append(outcome[1])
    return RefinementResult(
        diagnoses=diagnoses,
        revised_properties=revised,
        change_annotations=annotations,
        baseline=baseline,
    )


# -- rubrics and evaluation -------------------------------------------------


@dataclass(frozen=True)
class Criterion:
    name: str
    weight: float
    description: str = ""


@dataclass(frozen=True)
class Rubric:
    name: str
    criteria: tuple[Criterion, ...]

    def __post_init__(self) -> None:
        if not self.criteria:
            raise ValueError("rubric requires at least one criterion")
        total = sum(c.weight for c in self.criteria)
        if abs(total - 100.0) > 1e-9:
            raise ValueError(f"rubric weights sum to {total}, expected 100")

    def weight_of(self, criterion_name: str) -> float:
        for criterion in self.criteria:
            if criterion.name == criterion_name:
                return criterion.weight
        raise KeyError(criterion_name)

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "criteria": [
                {"name": c.name, "weight": c.weight, "description": c.description}
                for c in self.criteria
            ],
        }


RUBRIC_PRESETS: dict[str, Rubric] = {
    "default": Rubric(
        "default",
        (
            Criterion("Accuracy", 25),
            Criterion("Relevance", 25),
            Criterion("Completeness", 25),
            Criterion("Context Utilization", 25),
        ),
    ),
    "sales": Rubric(
        "sales",
        (
            Criterion("Personalization", 30),
            Criterion("Value Proposition", 25),
            Criterion("CTA", 20),
            Criterion("Tone", 25),
        ),
    ),
    "support": Rubric(
        "support",
        (
            Criterion("Problem Understanding", 25),
            Criterion("Solution Accuracy", 30),
            Criterion("Clarity", 25),
            Criterion("Empathy", 20),
        ),
    ),
    "research": Rubric(
        "research",
        (
            Criterion("Thoroughness", 30),
            Criterion("Source Quality", 25),
            Criterion("Analysis", 25),
            Criterion("Organization", 20),
        ),
    ),
}


@dataclass
class ExecutionTrace:
    conversation_summary: str = ""
    tool_usage_log: list[dict[str, Any]] = field(default_factory=list)
    memory_recall_log: list[tuple[str, bool]] = field(default_factory=list)
    memory_creation_log: list[str] = field(default_factory=list)
    governance_log: list[tuple[str, float]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "conversationSummary": self.conversation_summary,
            "toolUsageLog": self.tool_usage_log,
            "memoryRecallLog": [
                {"entryId": eid, "used": used} for eid, used in self.memory_recall_log
            ],
            "memoryCreationLog": self.memory_creation_log,
            "governanceLog": [
                {"variableId": vid, "helpfulness": rating}
                for vid, rating in self.governance_log
            ],
        }


@dataclass
class EvaluationRecord:
    id: str
    org_id: str
    endpoint: str
    rubric_name: str
    criterion_scores: dict[str, float]
    total_score: float | None
    trace: ExecutionTrace
    model_id: str
    created_at: str
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "orgId": self.org_id,
            "endpoint": self.endpoint,
            "rubricName": self.rubric_name,
            "criterionScores": self.criterion_scores,
            "totalScore": self.total_score,
            "trace": self.trace.to_json(),
            "modelId": self.model_id,
            "createdAt": self.created_at,
            "warnings": self.warnings,
        }


def evaluate_interaction(
    endpoint: str,
    output: str,
    trace: ExecutionTrace,
    rubric: Rubric,
    completer: CompletionProvider,
    org_id: str,
    clock: Clock | None = None,
) -> EvaluationRecord:
    """Scores one interaction against a rubric via a single judge completion.

    The rubric leads the payload, the trace follows. Scores are clamped to
    each criterion's weight. Judge failure produces a record with absent
    scores; the trace is never lost.
    """
    now = clock.now_iso() if clock is not None else iso(utcnow())
    warnings: list[str] = []
    scores: dict[str, float] = {}
    total: float | None = None
    try:
        response = completer.complete(
            CompletionRequest(
                PromptKind.RUBRIC_SCORE,
                {"rubric": rubric.to_json(), "output": output, "trace": trace.to_json()},
                temperature=0.0,
            )
        )
        raw_scores = response.get("scores")
    except ProviderFailure as exc:
        warnings.append(f"judge failed: {exc}")
        raw_scores = None

    if raw_scores is not None:
        for criterion in rubric.criteria:
            value = raw_scores.get(criterion.name)
            if value is None:
                warnings.append(f"missing score for {criterion.name}; treated as 0")
                scores[criterion.name] = 0.0
                continue
            clamped = min(max(float(value), 0.0), criterion.weight)
            if clamped != float(value):
                warnings.append(
                    f"score {value} for {criterion.name} clamped to [0, {criterion.weight}]"
                )
            scores[criterion.name] = clamped
        total = sum(scores.values())

    return EvaluationRecord(
        id=deterministic_id("eval", org_id, endpoint, now, output, prefix="ev"),
        org_id=org_id,
        endpoint=endpoint,
        rubric_name=rubric.name,
        criterion_scores=scores,
        total_score=total,
        trace=trace,
        model_id=completer.model_id(),
        created_at=now,
        warnings=warnings,
    )


class EvaluationLog:
    """Append-only evaluation record log with a load-time consistency check."""

    def __init__(self) -> None:
        self._records: list[EvaluationRecord] = []

    def append(self, record: EvaluationRecord) -> None:
        if record.total_score is not None:
            recomputed = sum(record.criterion_scores.values())
            if abs(recomputed - record.total_score) > 1e-9:
                raise ValueError(
                    f"totalScore {record.total_score} does not match criteria sum {recomputed}"
                )
        self._records.append(record)

    def records(self) -> list[EvaluationRecord]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


# -- aggregation diagnostics ------------------------------------------------

_LOW_DEFAULT = 0.4
_HIGH_DEFAULT = 0.8


def _criterion_weights(records: Sequence[EvaluationRecord]) -> dict[str, float]:
    weights: dict[str, float] = {}
    for record in records:
        rubric = RUBRIC_PRESETS.get(record.rubric_name)
        if rubric is None:
            continue
        for criterion in rubric.criteria:
            weights.setdefault(criterion.name, criterion.weight)
    return weights


def aggregate_diagnostics(
    records: Sequence[EvaluationRecord],
    low_fraction: float = _LOW_DEFAULT,
    high_fraction: float = _HIGH_DEFAULT,
    variance_fraction: float = 0.3,
    low_total_threshold: float = 40.0,
) -> dict[str, Any]:
    """Pattern-matches recurring score shapes over an evaluation window.

    Thresholds are fractions of each criterion's weight: a criterion is
    "low" when its mean falls below low_fraction * weight and "high" above
    high_fraction * weight. Deterministic over a fixed record set.
    """
    scored = [r for r in records if r.total_score is not None]
    if not scored:
        return {
            "lowScoreAlerts": [],
            "perCriterionBreakdown": {},
            "trends": [],
            "diagnosticPatterns": [],
        }

    weights = _criterion_weights(scored)
    by_criterion: dict[str, list[float]] = {}
    for record in scored:
        for name, value in record.criterion_scores.items():
            by_criterion.setdefault(name, []).append(value)

    breakdown = {
        name: round(statistics.fmean(values), 6)
        for name, values in sorted(by_criterion.items())
    }

    def _is_low(name: str) -> bool:
        w = weights.get(name)
        return w is not None and name in breakdown and breakdown[name] < low_fraction * w

    def _is_high(name: str) -> bool:
        w = weights.get(name)
        return w is not None and name in breakdown and breakdown[name] > high_fraction * w

    patterns: list[dict[str, str]] = []
    if _is_low("Context Utilization") and _is_high("Completeness"):
        patterns.append(
            {
                "pattern": "Low Context Utilization, high Completeness",
                "interpretation": "Agent succeeded despite routing issues",
                "action": "Improve governance metadata",
            }
        )
    if _is_high("Context Utilization") and _is_low("Completeness"):
        patterns.append(
            {
                "pattern": "High Context Utilization, low Completeness",
                "interpretation": "Appropriate context but insufficient memory",
                "action": "Improve memory coverage",
            }
        )
    if _is_low("Personalization") and _is_high("Accuracy"):
        patterns.append(
            {
                "pattern": "Low Personalization, high Accuracy",
                "interpretation": "Entity memories sparse or not recalled",
                "action": "Check density; review recall",
            }
        )
    known = [name for name in breakdown if name in weights]
    if known and all(_is_low(name) for name in known):
        patterns.append(
            {
                "pattern": "Low across all criteria",
                "interpretation": "Model or prompt issue",
                "action": "Review model & system prompt",
            }
        )
    for name, values in sorted(by_criterion.items()):
        w = weights.get(name)
        if w is None or len(values) < 2:
            continue
        if statistics.pstdev(values) > variance_fraction * w:
            patterns.append(
                {
                    "pattern": f"High variance within {name}",
                    "interpretation": "Schema-data alignment issue",
                    "action": "Refine low-scoring types",
                }
            )

    alerts = [r.id for r in scored if (r.total_score or 0.0) < low_total_threshold]

    trends: list[dict[str, Any]] = []
    half = len(scored) // 2
    if half >= 1:
        first, second = scored[:half], scored[half:]
        for name in sorted(by_criterion):
            a = [r.criterion_scores[name] for r in first if name in r.criterion_scores]
            b = [r.criterion_scores[name] for r in second if name in r.criterion_scores]
            if a and b:
                trends.append(
                    {
                        "criterion": name,
                        "earlyMean": round(statistics.fmean(a), 6),
                        "lateMean": round(statistics.fmean(b), 6),
                        "delta": round(statistics.fmean(b) - statistics.fmean(a), 6),
                    }
                )
    annotations = []
    for prev, cur in zip(scored, scored[1:]):
        if prev.model_id != cur.model_id:
            annotations.append({"recordId": cur.id, "modelChange": [prev.model_id, cur.model_id]})

    return {
        "lowScoreAlerts": alerts,
        "perCriterionBreakdown": breakdown,
        "trends": trends,
        "trendAnnotations": annotations,
        "diagnosticPatterns": patterns,
    }
