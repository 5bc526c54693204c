"""Org-scoped JSON API over the engine.

Auth is a bearer token resolved to an orgId before any store is touched.
Domain exceptions map onto a small status-code vocabulary: 400 malformed,
401 unauthenticated, 404 unknown resource, 409 schema version conflict,
503 provider unavailable where the operation cannot degrade.
"""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .core import CRMKeys, EmptyKeys, InvalidConfig, InvalidEntry
from .engine import Engine, ProviderUnconfigured, SchemaNotFound, VersionConflict
from .extraction import PipelineOptions
from .governance import EmptyLibrary, ForeignSession, InvalidVariable, SessionExpired
from .providers import ProviderFailure
from .redaction import RedactionConfig
from .retrieval import EntityNotFound, InvalidRequest, RetrievalRequest
from .schema import ExecutionTrace, InvalidSchema, Schema
from .store import RetrievalFilter


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"error": {"code": code, "message": message}},
    )


# Most specific classes first; starlette dispatches on the exception MRO so
# ValueError at the bottom catches the remaining malformed-input family.
_DOMAIN_ERRORS: list[tuple[type[Exception], int, str]] = [
    (VersionConflict, 409, "versionConflict"),
    (SchemaNotFound, 404, "schemaNotFound"),
    (EntityNotFound, 404, "entityNotFound"),
    (EmptyLibrary, 404, "noVariables"),
    (ForeignSession, 404, "sessionNotFound"),
    (SessionExpired, 404, "sessionExpired"),
    (ProviderUnconfigured, 503, "providerUnconfigured"),
    (ProviderFailure, 503, "providerUnavailable"),
    (EmptyKeys, 400, "emptyKeys"),
    (InvalidRequest, 400, "invalidRequest"),
    (InvalidVariable, 400, "invalidVariable"),
    (InvalidSchema, 400, "invalidSchema"),
    (InvalidEntry, 400, "invalidEntry"),
    (InvalidConfig, 400, "invalidConfig"),
    (ValueError, 400, "invalidValue"),
]


async def _body(request: Request) -> dict[str, Any]:
    try:
        data = await request.json()
    except Exception:
        raise ApiError(400, "malformedBody", "request body must be valid JSON")
    if not isinstance(data, dict):
        raise ApiError(400, "malformedBody", "request body must be a JSON object")
    return data


def _need(data: dict[str, Any], key: str, kind: type) -> Any:
    value = data.get(key)
    if value is None:
        raise ApiError(400, "missingField", f"field {key!r} is required")
    if not isinstance(value, kind):
        raise ApiError(
            400, "badFieldType", f"field {key!r} must be {kind.__name__}"
        )
    return value


def _parse_keys(raw: Any) -> CRMKeys:
    if not isinstance(raw, dict):
        raise ApiError(400, "badFieldType", "crmKeys must be an object")
    return CRMKeys(
        record_id=raw.get("recordId"),
        email=raw.get("email"),
        website_url=raw.get("websiteUrl"),
        phone_number=raw.get("phoneNumber"),
        custom_identifiers=raw.get("customIdentifiers"),
    )


def _parse_options(data: dict[str, Any]) -> PipelineOptions | None:
    raw = data.get("options")
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ApiError(400, "badFieldType", "options must be an object")
    redaction = None
    red = raw.get("redaction")
    if red is not None:
        if not isinstance(red, dict):
            raise ApiError(400, "badFieldType", "options.redaction must be an object")
        kwargs: dict[str, Any] = {}
        if "enabledTiers" in red:
            kwargs["enabled_tiers"] = frozenset(red["enabledTiers"])
        if "strategy" in red:
            kwargs["strategy"] = red["strategy"]
        if "skipEmails" in red:
            kwargs["skip_emails"] = bool(red["skipEmails"])
        if "skipPhones" in red:
            kwargs["skip_phones"] = bool(red["skipPhones"])
        redaction = RedactionConfig(**kwargs)
    return PipelineOptions(
        mode=raw.get("mode"),
        drop_gated_facts=bool(raw.get("dropGatedFacts", False)),
        redaction=redaction,
        source=raw.get("source", "api"),
    )


def _parse_filter(raw: Any) -> RetrievalFilter:
    if raw is None:
        return RetrievalFilter()
    if not isinstance(raw, dict):
        raise ApiError(400, "badFieldType", "filter must be an object")
    record_id = raw.get("recordId")
    if isinstance(record_id, dict):
        record_id = _parse_keys(record_id)
    return RetrievalFilter(
        record_id=record_id,
        persons=tuple(raw["persons"]) if raw.get("persons") else None,
        entities=tuple(raw["entities"]) if raw.get("entities") else None,
        location=raw.get("location"),
        timestamp_from=raw.get("timestampFrom"),
        timestamp_to=raw.get("timestampTo"),
        memory_type=raw.get("memoryType", "both"),
    )


def _parse_trace(raw: Any) -> ExecutionTrace:
    if not isinstance(raw, dict):
        raise ApiError(400, "badFieldType", "trace must be an object")
    return ExecutionTrace(
        conversation_summary=raw.get("conversationSummary", ""),
        tool_usage_log=list(raw.get("toolUsageLog") or []),
        memory_recall_log=[
            (str(q), bool(hit)) for q, hit in (raw.get("memoryRecallLog") or [])
        ],
        memory_creation_log=[str(x) for x in (raw.get("memoryCreationLog") or [])],
        governance_log=[
            (str(name), float(score)) for name, score in (raw.get("governanceLog") or [])
        ],
    )


def _variable_json(variable) -> dict[str, Any]:
    return variable.to_json()


def create_app(engine: Engine, tokens: dict[str, str]) -> FastAPI:
    """Builds the service around one engine and a token -> orgId map."""
    app = FastAPI(title="orgmem", docs_url=None, redoc_url=None)

    def org_of(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise ApiError(401, "unauthorized", "missing bearer org token")
        org = tokens.get(header[7:].strip())
        if org is None:
            raise ApiError(401, "unauthorized", "unrecognized org token")
        return org

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return _error_response(400, "malformedBody", str(exc))

    def _register(cls: type[Exception], status: int, code: str) -> None:
        @app.exception_handler(cls)
        async def _handler(request: Request, exc: Exception, _s=status, _c=code):
            return _error_response(_s, _c, str(exc))

    for cls, status, code in _DOMAIN_ERRORS:
        _register(cls, status, code)

    # -- memory ------------------------------------------------------------

    @app.post("/v1/memorize")
    async def post_memorize(request: Request):
        org = org_of(request)
        data = await _body(request)
        content = _need(data, "content", str)
        keys = _parse_keys(data["crmKeys"]) if data.get("crmKeys") else None
        report = engine.memorize(
            org,
            content,
            crm_keys=keys,
            schema_id=data.get("schemaId"),
            options=_parse_options(data),
            user=data.get("user"),
        )
        return report.to_json()

    @app.post("/v1/retrieve")
    async def post_retrieve(request: Request):
        org = org_of(request)
        data = await _body(request)
        req = RetrievalRequest(
            org_id=org,
            query=_need(data, "query", str),
            k=int(data.get("k", 10)),
            filter=_parse_filter(data.get("filter")),
            reflect=bool(data.get("reflect", False)),
            max_rounds=data.get("maxRounds"),
            recency_decay=bool(data.get("recencyDecay", True)),
            synthesize=bool(data.get("synthesize", False)),
            extra_queries=tuple(data.get("extraQueries") or ()),
        )
        return engine.retrieve(req).to_json()

    @app.post("/v1/context/entity")
    async def post_entity_context(request: Request):
        org = org_of(request)
        data = await _body(request)
        keys = _parse_keys(_need(data, "crmKeys", dict))
        budget = _need(data, "tokenBudget", int)
        ctx = engine.entity_context(
            org, keys, budget, schema_id=data.get("schemaId")
        )
        return ctx.to_json()

    @app.post("/v1/consolidate")
    async def post_consolidate(request: Request):
        org = org_of(request)
        data = await _body(request)
        report = engine.consolidate(
            org, dry_run=bool(data.get("dryRun", False)), user=data.get("user")
        )
        return report.to_json()

    # -- governance --------------------------------------------------------

    @app.post("/v1/govern")
    async def post_govern(request: Request):
        org = org_of(request)
        data = await _body(request)
        return engine.govern(
            org,
            _need(data, "task", str),
            session_id=data.get("sessionId"),
            mode=data.get("mode", "auto"),
            user=data.get("user"),
        )

    @app.delete("/v1/govern/session/{session_id}")
    async def delete_session(session_id: str, request: Request):
        org = org_of(request)
        if not engine.drop_session(session_id, org_id=org):
            raise ApiError(404, "sessionNotFound", f"no session {session_id!r}")
        return {"dropped": session_id}

    @app.get("/v1/variables")
    async def list_variables(request: Request):
        org = org_of(request)
        return {"variables": [_variable_json(v) for v in engine.library.list(org)]}

    @app.post("/v1/variables")
    async def create_variable(request: Request):
        org = org_of(request)
        data = await _body(request)
        variable = engine.add_variable(
            org,
            name=_need(data, "name", str),
            content=_need(data, "content", str),
            description=data.get("description", ""),
            tags=tuple(data.get("tags") or ()),
            var_id=data.get("id"),
            user=data.get("user"),
        )
        return _variable_json(variable)

    @app.get("/v1/variables/{var_id}")
    async def get_variable(var_id: str, request: Request):
        org = org_of(request)
        variable = engine.library.get(org, var_id)
        if variable is None:
            raise ApiError(404, "variableNotFound", f"no variable {var_id!r}")
        return _variable_json(variable)

    @app.put("/v1/variables/{var_id}")
    async def put_variable(var_id: str, request: Request):
        org = org_of(request)
        data = await _body(request)
        if engine.library.get(org, var_id) is None:
            raise ApiError(404, "variableNotFound", f"no variable {var_id!r}")
        changes: dict[str, Any] = {}
        for src, dst in (
            ("name", "name"),
            ("content", "content"),
            ("description", "description"),
            ("visibility", "visibility"),
            ("accessLevel", "access_level"),
        ):
            if src in data:
                changes[dst] = data[src]
        if "tags" in data:
            changes["tags"] = tuple(data["tags"] or ())
        variable = engine.update_variable(org, var_id, user=data.get("user"), **changes)
        return _variable_json(variable)

    @app.delete("/v1/variables/{var_id}")
    async def delete_variable(var_id: str, request: Request):
        org = org_of(request)
        if not engine.remove_variable(org, var_id):
            raise ApiError(404, "variableNotFound", f"no variable {var_id!r}")
        return {"deleted": var_id}

    # -- schemas -----------------------------------------------------------

    @app.get("/v1/schemas")
    async def list_schemas(request: Request):
        org = org_of(request)
        return {"schemas": [s.to_json() for s in engine.list_schemas(org)]}

    @app.post("/v1/schemas")
    async def create_schema(request: Request):
        org = org_of(request)
        data = await _body(request)
        raw = dict(_need(data, "schema", dict))
        raw["orgId"] = org
        schema = Schema.from_json(raw)
        expected = data.get("expectedVersion")
        engine.put_schema(
            schema,
            expected_version=int(expected) if expected is not None else None,
            user=data.get("user"),
        )
        return schema.to_json()

    @app.get("/v1/schemas/{schema_id}")
    async def get_schema(schema_id: str, request: Request):
        org = org_of(request)
        return engine.get_schema(org, schema_id).to_json()

    @app.delete("/v1/schemas/{schema_id}")
    async def delete_schema(schema_id: str, request: Request):
        org = org_of(request)
        if not engine.delete_schema(org, schema_id):
            raise SchemaNotFound(schema_id)
        return {"deleted": schema_id}

    @app.post("/v1/schemas/author")
    async def author_schema(request: Request):
        org = org_of(request)
        data = await _body(request)
        schema, dropped = engine.author(
            org,
            _need(data, "intent", str),
            name=data.get("name", "authored"),
            user=data.get("user"),
        )
        return {"schema": schema.to_json(), "droppedProperties": dropped}

    @app.post("/v1/schemas/{schema_id}/refine")
    async def refine_schema(schema_id: str, request: Request):
        org = org_of(request)
        data = await _body(request)
        result = engine.refine(
            org,
            schema_id,
            _need(data, "sampleContent", str),
            expected=data.get("expected"),
            parallel=bool(data.get("parallel", False)),
        )
        return result.to_json()

    @app.post("/v1/properties/{property_id}/enhance")
    async def enhance_property(property_id: str, request: Request):
        org = org_of(request)
        data = await _body(request)
        schema, prop = engine.enhance(
            org, property_id, _need(data, "feedback", str), user=data.get("user")
        )
        return {"schema": schema.to_json(), "property": prop.to_json()}

    # -- evaluation --------------------------------------------------------

    @app.post("/v1/evaluate")
    async def post_evaluate(request: Request):
        org = org_of(request)
        data = await _body(request)
        record = engine.evaluate(
            org,
            endpoint=_need(data, "endpoint", str),
            output=_need(data, "output", str),
            trace=_parse_trace(_need(data, "trace", dict)),
            rubric=data.get("rubric", "default"),
            user=data.get("user"),
        )
        return record.to_json()

    @app.get("/v1/diagnostics")
    async def get_diagnostics(request: Request):
        org = org_of(request)
        return engine.diagnostics(org)

    # -- lifecycle ---------------------------------------------------------

    @app.get("/v1/health")
    async def get_health(request: Request):
        org = org_of(request)
        health = engine.health()
        health["orgId"] = org
        health["stores"] = {org: health["stores"].get(org, {})}
        return health

    return app
