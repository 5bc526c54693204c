"""Facade wiring stores, providers, routing, schemas, and evaluation.

One Engine instance owns the org-partitioned stores and registries that
the HTTP service and CLI expose. All operations take an explicit orgId;
nothing here ever crosses partitions.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any

from .consolidation import ConsolidationReport, consolidate
from .core import (
    Clock,
    CRMKeys,
    EngineConfig,
)
from .extraction import PipelineOptions, PipelineReport, memorize
from .governance import (
    GovernanceRouter,
    GovernanceVariable,
    VariableLibrary,
    make_variable,
    rehydrate_variable,
)
from .providers import HashEmbedder
from .retrieval import (
    EntityContext,
    RetrievalRequest,
    RetrievalResult,
    entity_context,
    retrieve,
)
from .schema import (
    RUBRIC_PRESETS,
    EvaluationLog,
    EvaluationRecord,
    ExecutionTrace,
    RefinementResult,
    Rubric,
    Schema,
    SchemaProperty,
    aggregate_diagnostics,
    author_schema,
    enhance_property,
    evaluate_interaction,
    refine_schema,
)
from .store import MemoryStore


class SchemaNotFound(LookupError):
    pass


class VersionConflict(RuntimeError):
    pass


class ProviderUnconfigured(RuntimeError):
    pass


class Engine:
    """Org-scoped memory, governance, schema, and evaluation operations."""

    def __init__(
        self,
        config: EngineConfig | None = None,
        data_root: str | Path | None = None,
        embedder=None,
        completer=None,
        clock: Clock | None = None,
        model_id: str | None = None,
    ):
        self.config = config or EngineConfig()
        self.clock = clock or Clock()
        self.embedder = embedder or HashEmbedder(dim=self.config.embedding_dim)
        self.completer = completer
        self.model_id = model_id
        self.data_root = Path(data_root) if data_root else None
        store_root = self.data_root / "store" if self.data_root else None
        self.store = MemoryStore(
            dim=self.embedder.dimension(), root=store_root, embedder=self.embedder
        )
        self.library = VariableLibrary(self.embedder, self.completer)
        self.router = GovernanceRouter(
            self.library, self.embedder, self.completer, self.config, self.clock
        )
        self._schemas: dict[str, dict[str, Schema]] = {}
        self._schema_lock = threading.Lock()
        self._eval_logs: dict[str, EvaluationLog] = {}
        self._oplog: list[dict[str, Any]] = []
        self._oplog_path = (
            self.data_root / "operations.jsonl" if self.data_root else None
        )

    # ------------------------------------------------------------- logging

    def log_operation(
        self, operation: str, org_id: str, user: str | None = None, **metadata: Any
    ) -> None:
        line = {
            "ts": self.clock.now_iso(),
            "operation": operation,
            "orgId": org_id,
            "user": user or org_id,
            "metadata": metadata,
        }
        self._oplog.append(line)
        if self._oplog_path is not None:
            self._oplog_path.parent.mkdir(parents=True, exist_ok=True)
            with self._oplog_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(line, ensure_ascii=False) + "\n")

    def operation_log(self) -> list[dict[str, Any]]:
        return list(self._oplog)

    # ---------------------------------------------------- sidecar documents

    def _sidecar(self, kind: str, org_id: str, item_id: str) -> Path | None:
        if self.data_root is None:
            return None
        return self.data_root / kind / org_id / f"{item_id}.json"

    @staticmethod
    def _save_sidecar(path: Path | None, data: dict[str, Any]) -> None:
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(data, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )

    @staticmethod
    def _drop_sidecar(path: Path | None) -> None:
        if path is not None and path.exists():
            path.unlink()

    # -------------------------------------------------------------- memory

    def memorize(
        self,
        org_id: str,
        content: str,
        crm_keys: CRMKeys | None = None,
        schema_id: str | None = None,
        options: PipelineOptions | None = None,
        user: str | None = None,
    ) -> PipelineReport:
        schema = self.get_schema(org_id, schema_id) if schema_id else None
        report = memorize(
            content,
            org_id,
            self.store,
            self.embedder,
            self._require_completer(),
            self.config,
            crm_keys=crm_keys,
            schema=schema,
            clock=self.clock,
            options=options,
            model_id=self.model_id,
        )
        self.log_operation(
            "memorize",
            org_id,
            user,
            storedFacts=report.stored_facts,
            storedProps=report.stored_props,
            skippedDuplicates=report.skipped_duplicates,
        )
        return report

    def retrieve(self, req: RetrievalRequest) -> RetrievalResult:
        return retrieve(
            req, self.store, self.embedder, self.completer, self.config, self.clock
        )

    def entity_context(
        self,
        org_id: str,
        keys: CRMKeys,
        token_budget: int,
        schema_id: str | None = None,
    ) -> EntityContext:
        schema = self.get_schema(org_id, schema_id) if schema_id else None
        return entity_context(
            self.store, org_id, keys, token_budget, self.config, schema=schema
        )

    def consolidate(
        self, org_id: str, dry_run: bool = False, user: str | None = None
    ) -> ConsolidationReport:
        report = consolidate(
            self.store, org_id, self.config, dry_run=dry_run, clock=self.clock
        )
        if not dry_run:
            self.log_operation(
                "consolidate",
                org_id,
                user,
                merged=len(report.merged),
                pruned=len(report.pruned),
            )
        return report

    def compact(self, org_id: str) -> dict[str, int]:
        return self.store.compact(org_id)

    def register_entity(self, org_id: str, keys: CRMKeys) -> None:
        self.store.register_entity(org_id, keys)

    # ---------------------------------------------------------- governance

    def govern(
        self,
        org_id: str,
        task: str,
        session_id: str | None = None,
        mode: str = "auto",
        user: str | None = None,
    ) -> dict[str, Any]:
        routed = self.router.route(task, org_id, session_id=session_id, mode=mode)
        compiled = self.router.compile_context(routed, org_id)
        if session_id:
            self.log_operation(
                "govern.session", org_id, user,
                sessionId=session_id, mode=routed.mode,
                delivered=len(routed.critical),
            )
        return {"routed": routed.to_json(), "compiledContext": compiled}

    def drop_session(
        self, session_id: str, org_id: str | None = None, user: str | None = None
    ) -> bool:
        dropped = self.router.sessions.drop(session_id, org_id)
        if dropped and org_id:
            self.log_operation("session.drop", org_id, user, sessionId=session_id)
        return dropped

    def add_variable(
        self,
        org_id: str,
        name: str,
        content: str,
        description: str = "",
        tags: tuple[str, ...] = (),
        var_id: str | None = None,
        user: str | None = None,
    ) -> GovernanceVariable:
        variable = self.library.add(
            make_variable(org_id, name, content, description, tags, var_id)
        )
        self._save_sidecar(
            self._sidecar("variables", org_id, variable.id), variable.to_json()
        )
        self.log_operation("variable.create", org_id, user, variableId=variable.id)
        return variable

    def update_variable(
        self, org_id: str, var_id: str, user: str | None = None, **changes: Any
    ) -> GovernanceVariable:
        variable = self.library.update(org_id, var_id, **changes)
        self._save_sidecar(
            self._sidecar("variables", org_id, var_id), variable.to_json()
        )
        self.log_operation("variable.update", org_id, user, variableId=var_id)
        return variable

    def remove_variable(
        self, org_id: str, var_id: str, user: str | None = None
    ) -> bool:
        removed = self.library.remove(org_id, var_id)
        if removed:
            self._drop_sidecar(self._sidecar("variables", org_id, var_id))
            self.log_operation("variable.delete", org_id, user, variableId=var_id)
        return removed

    # ------------------------------------------------------------- schemas

    def put_schema(
        self,
        schema: Schema,
        expected_version: int | None = None,
        user: str | None = None,
    ) -> Schema:
        """Stores a schema; compare-and-swap when expected_version given."""
        with self._schema_lock:
            held = self._schemas.get(schema.org_id, {}).get(schema.id)
            if expected_version is not None:
                current = held.version if held else None
                if current != expected_version:
                    raise VersionConflict(
                        f"schema {schema.id} at version {current}, "
                        f"expected {expected_version}"
                    )
            self._schemas.setdefault(schema.org_id, {})[schema.id] = schema
        self._save_sidecar(
            self._sidecar("schemas", schema.org_id, schema.id), schema.to_json()
        )
        self.log_operation(
            "schema.put", schema.org_id, user,
            schemaId=schema.id, version=schema.version,
        )
        return schema

    def get_schema(self, org_id: str, schema_id: str) -> Schema:
        schema = self._schemas.get(org_id, {}).get(schema_id)
        if schema is None:
            raise SchemaNotFound(schema_id)
        return schema

    def list_schemas(self, org_id: str) -> list[Schema]:
        return sorted(self._schemas.get(org_id, {}).values(), key=lambda s: s.id)

    def delete_schema(
        self, org_id: str, schema_id: str, user: str | None = None
    ) -> bool:
        with self._schema_lock:
            removed = self._schemas.get(org_id, {}).pop(schema_id, None) is not None
        if removed:
            self._drop_sidecar(self._sidecar("schemas", org_id, schema_id))
            self.log_operation("schema.delete", org_id, user, schemaId=schema_id)
        return removed

    def _require_completer(self):
        if self.completer is None:
            raise ProviderUnconfigured(
                "operation requires a completion provider"
            )
        return self.completer

    def author(
        self, org_id: str, intent: str, name: str = "authored",
        user: str | None = None,
    ) -> tuple[Schema, list[str]]:
        schema, dropped = author_schema(
            intent, self._require_completer(), org_id=org_id, name=name
        )
        self.put_schema(schema, user=user)
        return schema, dropped

    def enhance(
        self,
        org_id: str,
        property_id: str,
        feedback: str,
        user: str | None = None,
    ) -> tuple[Schema, SchemaProperty]:
        """Revises one property wherever it is declared; bumps the schema."""
        from dataclasses import replace

        for schema in self.list_schemas(org_id):
            prop = schema.property_by_id(property_id)
            if prop is None:
                continue
            revised = enhance_property(prop, feedback, self._require_completer())
            updated = replace(
                schema,
                properties=tuple(
                    revised if p.id == property_id else p
                    for p in schema.properties
                ),
                version=schema.version + 1,
            )
            self.put_schema(updated, user=user)
            return updated, revised
        raise SchemaNotFound(f"no schema declares property {property_id}")

    def refine(
        self,
        org_id: str,
        schema_id: str,
        sample_content: str,
        expected: dict[str, Any] | None = None,
        parallel: bool = False,
    ) -> RefinementResult:
        """Replay-diagnose-optimize against a scratch store.

        The replay must not write into live partitions, so extraction runs
        against a throwaway in-memory store.
        """
        schema = self.get_schema(org_id, schema_id)
        completer = self._require_completer()

        def replay(content: str, target_schema: Schema) -> PipelineReport:
            scratch = MemoryStore(
                dim=self.embedder.dimension(), embedder=self.embedder
            )
            return memorize(
                content,
                org_id,
                scratch,
                self.embedder,
                completer,
                self.config,
                schema=target_schema,
                clock=self.clock,
            )

        return refine_schema(
            schema, sample_content, completer, replay,
            expected=expected, parallel=parallel,
        )

    # ---------------------------------------------------------- evaluation

    def eval_log(self, org_id: str) -> EvaluationLog:
        return self._eval_logs.setdefault(org_id, EvaluationLog())

    def evaluate(
        self,
        org_id: str,
        endpoint: str,
        output: str,
        trace: ExecutionTrace,
        rubric: Rubric | str = "default",
        user: str | None = None,
    ) -> EvaluationRecord:
        if isinstance(rubric, str):
            preset = RUBRIC_PRESETS.get(rubric)
            if preset is None:
                raise ValueError(f"unknown rubric preset {rubric!r}")
            rubric = preset
        record = evaluate_interaction(
            endpoint, output, trace, rubric,
            self._require_completer(), org_id, clock=self.clock,
        )
        self.eval_log(org_id).append(record)
        self.log_operation(
            "evaluate", org_id, user,
            recordId=record.id, totalScore=record.total_score,
        )
        return record

    def diagnostics(self, org_id: str) -> dict[str, Any]:
        return aggregate_diagnostics(self.eval_log(org_id).records())

    # ------------------------------------------------------------- lifecycle

    def health(self) -> dict[str, Any]:
        provider: dict[str, Any] = {"configured": self.completer is not None}
        if self.model_id:
            provider["model"] = self.model_id
        settings = getattr(self.completer, "_settings", None)
        if settings is not None:
            provider["endpoint"] = getattr(settings, "endpoint", None)
            if getattr(settings, "api_key", None):
                provider["apiKey"] = "****"
        return {
            "status": "ok",
            "config": self.config.to_json(),
            "provider": provider,
            "stores": self.store.stats(),
        }

    def persist(self, org_id: str | None = None) -> None:
        orgs = [org_id] if org_id else self.store.org_ids()
        for org in orgs:
            self.store.persist(org)

    def restore(self, org_id: str) -> int:
        return self.store.restore(org_id)

    def restore_all(self) -> dict[str, int]:
        """Reloads every org found under the data root: store partitions,
        schema documents, and governance variables. Returns entry counts."""
        if self.data_root is None:
            return {}
        counts: dict[str, int] = {}
        store_root = self.data_root / "store"
        if store_root.exists():
            for child in sorted(store_root.iterdir()):
                if child.is_dir():
                    counts[child.name] = self.store.restore(child.name)
        schema_root = self.data_root / "schemas"
        if schema_root.exists():
            for org_dir in sorted(schema_root.iterdir()):
                for path in sorted(org_dir.glob("*.json")):
                    data = json.loads(path.read_text(encoding="utf-8"))
                    schema = Schema.from_json(data)
                    with self._schema_lock:
                        self._schemas.setdefault(schema.org_id, {})[
                            schema.id
                        ] = schema
        var_root = self.data_root / "variables"
        if var_root.exists():
            for org_dir in sorted(var_root.iterdir()):
                for path in sorted(org_dir.glob("*.json")):
                    data = json.loads(path.read_text(encoding="utf-8"))
                    self.library.put_raw(rehydrate_variable(data, self.embedder))
        return counts
