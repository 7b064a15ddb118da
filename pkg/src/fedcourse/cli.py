"""Command-line client for the experiment service.

Every verb talks to the HTTP API: by default against an in-process
application instance (no socket), or against a remote server via
``--server``. Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import asyncio
import json
import sys

import click
import httpx

from fedcourse import __version__
from fedcourse.config import apply_overrides, load_config_data
from fedcourse.errors import ConfigError

CONFIG_EXIT = 1
RUNTIME_EXIT = 2


class ApiClient:
    """Small wrapper choosing in-process ASGI or remote HTTP transport."""

    def __init__(self, server: str | None) -> None:
        self._server = server

    def post(self, path: str, payload: dict) -> dict:
        try:
            if self._server is None:
                response = asyncio.run(self._post_in_process(path, payload))
            else:
                with httpx.Client(base_url=self._server, timeout=None) as client:
                    response = client.post(path, json=payload)
        except httpx.HTTPError as exc:
            click.echo(f"error: service unreachable: {exc}", err=True)
            sys.exit(RUNTIME_EXIT)
        if response.status_code >= 400:
            detail = _detail(response)
            click.echo(f"error: {detail}", err=True)
            sys.exit(CONFIG_EXIT if response.status_code in (400, 422) else RUNTIME_EXIT)
        return response.json()

    @staticmethod
    async def _post_in_process(path: str, payload: dict) -> httpx.Response:
        from fedcourse.service.app import create_app

        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://fedcourse.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)


def _detail(response: httpx.Response) -> str:
    try:
        body = response.json()
    except ValueError:
        return response.text
    detail = body.get("detail", body)
    if isinstance(detail, str):
        return detail
    return json.dumps(detail)


def _load_config_dict(path: str, overrides: tuple[str, ...]) -> dict:
    try:
        data = load_config_data(path)
        if overrides:
            data = apply_overrides(data, list(overrides))
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(CONFIG_EXIT)
    except FileNotFoundError:
        click.echo(f"error: config file not found: {path}", err=True)
        sys.exit(CONFIG_EXIT)
    return data


config_option = click.option(
    "-c", "--config", "config_path", required=True, type=str, help="Experiment config YAML."
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override a config entry, e.g. --set federation.rounds=5.",
)


@click.group()
@click.version_option(version=__version__)
@click.option("--server", default=None, metavar="URL", help="Remote service URL (default: in-process).")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Federated course recommendation experiments."""
    ctx.obj = server


@main.command()
@config_option
@set_option
@click.option("-o", "--out", "out_dir", required=True, type=str, help="Output directory.")
@click.pass_obj
def run(server: str | None, config_path: str, overrides: tuple[str, ...], out_dir: str) -> None:
    """Train and evaluate one experiment; write metrics, rounds, checkpoint."""
    payload = {"config": _load_config_dict(config_path, overrides), "out_dir": out_dir}
    report = ApiClient(server).post("/runs", payload)
    click.echo(json.dumps(report, indent=2))


@main.command()
@config_option
@set_option
@click.option("--axis", required=True, type=click.Choice(["embedding_dim", "attention_heads"]))
@click.option("--values", required=True, metavar="V1,V2,...", help="Comma-separated integers.")
@click.option("-o", "--out", "out_dir", required=True, type=str, help="Output directory.")
@click.pass_obj
def sweep(
    server: str | None,
    config_path: str,
    overrides: tuple[str, ...],
    axis: str,
    values: str,
    out_dir: str,
) -> None:
    """Run the experiment once per axis value and emit a CSV table."""
    try:
        parsed = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        click.echo(f"error: --values must be comma-separated integers, got {values!r}", err=True)
        sys.exit(CONFIG_EXIT)
    if not parsed:
        click.echo("error: --values is empty", err=True)
        sys.exit(CONFIG_EXIT)
    payload = {
        "config": _load_config_dict(config_path, overrides),
        "axis": axis,
        "values": parsed,
        "out_dir": out_dir,
    }
    result = ApiClient(server).post("/sweeps", payload)
    click.echo(json.dumps(result, indent=2))


@main.command()
@click.option("--checkpoint", required=True, type=str, help="Path to checkpoint.bin.")
@click.option("--school", "school_id", required=True, type=int)
@click.option("--student", "student_id", required=True, type=int)
@click.option("-k", required=True, type=int, help="List length.")
@click.pass_obj
def recommend(server: str | None, checkpoint: str, school_id: int, student_id: int, k: int) -> None:
    """Print the top-k unseen courses for one student, best first."""
    payload = {
        "checkpoint": checkpoint,
        "school_id": school_id,
        "student_id": student_id,
        "k": k,
    }
    result = ApiClient(server).post("/recommendations", payload)
    for item in result["items"]:
        click.echo(f"{item['course']}\t{item['score']:.6f}")


@main.command("gen-data")
@config_option
@set_option
@click.option("-o", "--out", "out_dir", required=True, type=str, help="Output directory.")
@click.pass_obj
def gen_data(server: str | None, config_path: str, overrides: tuple[str, ...], out_dir: str) -> None:
    """Write the configured synthetic dataset as catalog + per-school CSVs."""
    payload = {"config": _load_config_dict(config_path, overrides), "out_dir": out_dir}
    result = ApiClient(server).post("/datasets/synthetic", payload)
    click.echo(json.dumps(result, indent=2))


@main.command("inspect-graph")
@config_option
@set_option
@click.option("--school", "school_id", required=True, type=int)
@click.option("--edges", is_flag=True, help="Also print the full edge list.")
@click.pass_obj
def inspect_graph(
    server: str | None,
    config_path: str,
    overrides: tuple[str, ...],
    school_id: int,
    edges: bool,
) -> None:
    """Summarize one school's interaction graph."""
    payload = {"config": _load_config_dict(config_path, overrides), "school_id": school_id}
    result = ApiClient(server).post("/graphs/inspect", payload)
    edge_list = result.pop("edge_list")
    click.echo(json.dumps(result, indent=2))
    if edges:
        for line in edge_list:
            click.echo(line)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn

    from fedcourse.service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
