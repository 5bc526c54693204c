"""Command line surface for the engine.

Subcommands operate on one engine instance configured from a YAML file
(``--config`` or the ORGMEM_CONFIG env var) plus environment overrides.
Domain failures exit nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import functools
import json
import os
import socket
import sys
from pathlib import Path
from typing import Any

import click
import yaml

from .core import CRMKeys, EngineConfig, InvalidConfig, ManualClock
from .engine import Engine, ProviderUnconfigured, SchemaNotFound, VersionConflict
from .governance import EmptyLibrary
from .providers import (
    ProviderFailure,
    PromptKind,
    RemoteCompletionProvider,
    RemoteProviderSettings,
    ScriptedCompleter,
)
from .retrieval import EntityNotFound, RetrievalRequest
from .service import create_app


class CliError(click.ClickException):
    """Click exception rendered as one JSON object on stderr."""

    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code

    def show(self, file=None) -> None:
        payload = {"error": {"code": self.code, "message": self.format_message()}}
        click.echo(json.dumps(payload), err=True)


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any):
        try:
            return fn(*args, **kwargs)
        except CliError:
            raise
        except ProviderUnconfigured as exc:
            raise CliError("providerUnconfigured", str(exc))
        except ProviderFailure as exc:
            raise CliError("providerUnavailable", str(exc))
        except (SchemaNotFound, EntityNotFound, EmptyLibrary) as exc:
            raise CliError("notFound", str(exc))
        except VersionConflict as exc:
            raise CliError("versionConflict", str(exc))
        except (InvalidConfig, ValueError) as exc:
            raise CliError("invalidValue", str(exc))

    return wrapper


def load_settings(
    config_path: str | None, env: dict[str, str] | None = None
) -> dict[str, Any]:
    env = env if env is not None else dict(os.environ)
    path = config_path or env.get("ORGMEM_CONFIG")
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError("configNotFound", f"configuration file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise CliError("configInvalid", f"cannot parse {path}: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError("configInvalid", f"{path} must contain a mapping")
    return data


def _build_completer(settings: dict[str, Any], env: dict[str, str]):
    provider = settings.get("provider") or {}
    kind = provider.get("kind")
    if kind is None and env.get("ORGMEM_PROVIDER_ENDPOINT"):
        kind = "remote"
    if kind in (None, "none"):
        return None
    if kind == "scripted":
        completer = ScriptedCompleter()
        for entry in provider.get("scripts") or []:
            completer.script(
                PromptKind(entry["kind"]),
                entry.get("response") or {},
                marker=entry.get("marker"),
            )
        return completer
    if kind == "remote":
        remote = RemoteProviderSettings(
            endpoint=env.get("ORGMEM_PROVIDER_ENDPOINT")
            or provider.get("endpoint", ""),
            model=env.get("ORGMEM_PROVIDER_MODEL")
            or provider.get("model", "default"),
            api_key=env.get("ORGMEM_PROVIDER_API_KEY")
            or provider.get("apiKey", ""),
        )
        if not remote.endpoint:
            raise CliError(
                "providerUnconfigured",
                "remote provider needs an endpoint (provider.endpoint or "
                "ORGMEM_PROVIDER_ENDPOINT)",
            )
        return RemoteCompletionProvider(remote)
    raise CliError("configInvalid", f"unknown provider kind {kind!r}")


def build_engine(settings: dict[str, Any], env: dict[str, str] | None = None) -> Engine:
    env = env if env is not None else dict(os.environ)
    try:
        config = EngineConfig.from_dict(settings.get("config") or {})
    except InvalidConfig as exc:
        raise CliError("configInvalid", str(exc))
    data_root = env.get("ORGMEM_DATA_ROOT") or settings.get("dataRoot")
    clock = ManualClock(settings["clock"]) if settings.get("clock") else None
    engine = Engine(
        config=config,
        data_root=data_root,
        completer=_build_completer(settings, env),
        clock=clock,
    )
    engine.restore_all()
    return engine


def _engine(ctx: click.Context) -> Engine:
    settings = load_settings(ctx.obj.get("config_path"))
    return build_engine(settings)


def _emit(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True))


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(),
    default=None,
    help="Engine configuration file (falls back to ORGMEM_CONFIG).",
)
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Governed memory engine for agent workflows."""
    ctx.obj = {"config_path": config_path}


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, type=int, help="0 binds an ephemeral port.")
@click.pass_context
@_guard
def serve(ctx: click.Context, host: str, port: int) -> None:
    """Run the HTTP service; prints the bound address before serving."""
    import uvicorn

    settings = load_settings(ctx.obj.get("config_path"))
    engine = build_engine(settings)
    tokens = (settings.get("auth") or {}).get("tokens") or {}
    if not tokens:
        raise CliError(
            "authNotConfigured",
            "auth.tokens must map bearer tokens to org ids",
        )
    app = create_app(engine, tokens)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    bound = sock.getsockname()[1]
    click.echo(f"listening on {host}:{bound}")
    sys.stdout.flush()
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning"))
    server.run(sockets=[sock])


@main.command()
@click.option("--org", required=True)
@click.option(
    "--file",
    "file_path",
    type=click.Path(),
    default=None,
    help="Read content from this file instead of stdin.",
)
@click.option("--record-id", default=None, help="Attach facts to this entity.")
@click.option("--schema-id", default=None)
@click.pass_context
@_guard
def memorize(
    ctx: click.Context,
    org: str,
    file_path: str | None,
    record_id: str | None,
    schema_id: str | None,
) -> None:
    """Run the extraction pipeline over a document."""
    if file_path:
        p = Path(file_path)
        if not p.exists():
            raise CliError("fileNotFound", f"no such file: {file_path}")
        content = p.read_text(encoding="utf-8")
    else:
        content = sys.stdin.read()
    if not content.strip():
        raise CliError("emptyContent", "nothing to memorize")
    engine = _engine(ctx)
    keys = CRMKeys(record_id=record_id) if record_id else None
    report = engine.memorize(
        org, content, crm_keys=keys, schema_id=schema_id, user="cli"
    )
    _emit(report.to_json())


@main.command()
@click.argument("query")
@click.option("--org", required=True)
@click.option("--k", default=10, show_default=True)
@click.option("--reflect", is_flag=True)
@click.option("--synthesize", is_flag=True)
@click.option("--record-id", default=None, help="Restrict to one entity.")
@click.pass_context
@_guard
def retrieve(
    ctx: click.Context,
    query: str,
    org: str,
    k: int,
    reflect: bool,
    synthesize: bool,
    record_id: str | None,
) -> None:
    """Search org memory, optionally with reflection and synthesis."""
    from .store import RetrievalFilter

    engine = _engine(ctx)
    req = RetrievalRequest(
        org_id=org,
        query=query,
        k=k,
        reflect=reflect,
        synthesize=synthesize,
        filter=RetrievalFilter(record_id=record_id),
    )
    _emit(engine.retrieve(req).to_json())


@main.command()
@click.argument("task")
@click.option("--org", required=True)
@click.option("--mode", default="auto", show_default=True,
              type=click.Choice(["auto", "fast", "full"]))
@click.option("--session", "session_id", default=None)
@click.pass_context
@_guard
def govern(
    ctx: click.Context, task: str, org: str, mode: str, session_id: str | None
) -> None:
    """Route governance variables for a task description."""
    engine = _engine(ctx)
    _emit(engine.govern(org, task, session_id=session_id, mode=mode, user="cli"))


@main.command()
@click.option("--org", required=True)
@click.option("--dry-run", is_flag=True)
@click.pass_context
@_guard
def consolidate(ctx: click.Context, org: str, dry_run: bool) -> None:
    """Merge near-duplicate memories and prune stale ones."""
    engine = _engine(ctx)
    _emit(engine.consolidate(org, dry_run=dry_run, user="cli").to_json())


@main.group()
def schema() -> None:
    """Author, enhance, and refine extraction schemas."""


@schema.command("author")
@click.argument("intent")
@click.option("--org", required=True)
@click.option("--name", default="authored", show_default=True)
@click.pass_context
@_guard
def schema_author(ctx: click.Context, intent: str, org: str, name: str) -> None:
    engine = _engine(ctx)
    created, dropped = engine.author(org, intent, name=name, user="cli")
    _emit({"schema": created.to_json(), "droppedProperties": dropped})


@schema.command("enhance")
@click.argument("property_id")
@click.argument("feedback")
@click.option("--org", required=True)
@click.pass_context
@_guard
def schema_enhance(
    ctx: click.Context, property_id: str, feedback: str, org: str
) -> None:
    engine = _engine(ctx)
    updated, prop = engine.enhance(org, property_id, feedback, user="cli")
    _emit({"schema": updated.to_json(), "property": prop.to_json()})


@schema.command("refine")
@click.argument("schema_id")
@click.option("--org", required=True)
@click.option("--sample", "sample_path", type=click.Path(), required=True,
              help="Sample document replayed through extraction.")
@click.option("--expected", default=None,
              help="JSON object of expected property values.")
@click.option("--parallel", is_flag=True)
@click.pass_context
@_guard
def schema_refine(
    ctx: click.Context,
    schema_id: str,
    org: str,
    sample_path: str,
    expected: str | None,
    parallel: bool,
) -> None:
    p = Path(sample_path)
    if not p.exists():
        raise CliError("fileNotFound", f"no such file: {sample_path}")
    expectations = None
    if expected:
        try:
            expectations = json.loads(expected)
        except json.JSONDecodeError as exc:
            raise CliError("invalidValue", f"--expected must be JSON: {exc}")
    engine = _engine(ctx)
    result = engine.refine(
        org,
        schema_id,
        p.read_text(encoding="utf-8"),
        expected=expectations,
        parallel=parallel,
    )
    _emit(result.to_json())


@main.group(name="eval")
def eval_group() -> None:
    """Run the built-in experiment suite."""


@eval_group.command("run")
@click.argument("experiment")
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Write the canonical JSON report here.")
@click.option("--size", "sizes", multiple=True, metavar="KEY=VALUE",
              help="Override a dataset size knob, repeatable.")
@_guard
def eval_run(
    experiment: str, seed: int, report_path: str | None, sizes: tuple[str, ...]
) -> None:
    """Generate the experiment's dataset, run it, and print metrics."""
    from .evalharness import EXPERIMENTS, canonical_json, run_experiment

    if experiment not in EXPERIMENTS:
        raise CliError(
            "unknownExperiment",
            f"unknown experiment {experiment!r}; pick from "
            f"{sorted(EXPERIMENTS)}",
        )
    overrides: dict[str, int] = {}
    for item in sizes:
        key, sep, value = item.partition("=")
        if not sep or not value.lstrip("-").isdigit():
            raise CliError("invalidValue", f"--size expects KEY=INT, got {item!r}")
        overrides[key] = int(value)
    report = run_experiment(experiment, seed=seed, size_overrides=overrides)
    width = max(len(k) for k in report.metrics)
    click.echo(f"experiment {report.experiment} (seed {report.seed})")
    for key in sorted(report.metrics):
        value = report.metrics[key]
        if isinstance(value, (list, dict)):
            shown = f"[{len(value)} entries]"
        elif isinstance(value, float):
            shown = f"{value:.6g}"
        else:
            shown = value
        click.echo(f"  {key:<{width}}  {shown}")
    for name in sorted(report.bands):
        band = report.bands[name]
        verdict = "pass" if band["passed"] else "FAIL"
        click.echo(f"  [{verdict}] {name}: {band['requirement']}")
    blob = canonical_json(report.to_json())
    if report_path:
        Path(report_path).write_text(blob + "\n", encoding="utf-8")
        click.echo(f"report written to {report_path}")
    else:
        click.echo(blob)


if __name__ == "__main__":
    main()
