"""``bridge``: command-line client for the operator's admin API.

Exit codes are stable: 0 success, 1 remote job failed or was killed,
2 invalid job document, 3 job already exists, 4 job not found,
5 job already finished, 6 operator unreachable or other errors.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import httpx

from .errors import SchemaError
from .jobspec import DEFAULT_NAMESPACE, parse_spec

EXIT_OK = 0
EXIT_REMOTE_FAILED = 1
EXIT_SCHEMA = 2
EXIT_DUPLICATE = 3
EXIT_NOT_FOUND = 4
EXIT_INVALID_STATE = 5
EXIT_UNAVAILABLE = 6

ERROR_EXITS = {
    "SchemaError": EXIT_SCHEMA,
    "AlreadyExists": EXIT_DUPLICATE,
    "NotFound": EXIT_NOT_FOUND,
    "InvalidState": EXIT_INVALID_STATE,
}

DEFAULT_ENDPOINT = "http://127.0.0.1:8080"


class ApiFailure(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class Client:
    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.http = httpx.Client(base_url=endpoint.rstrip("/"), timeout=timeout)

    def _check(self, response: httpx.Response) -> dict:
        if response.is_success:
            return response.json()
        try:
            body = response.json()
        except ValueError:
            body = {"error": "HTTPError", "detail": response.text}
        name = body.get("error", "HTTPError")
        detail = body.get("detail", "")
        if body.get("errors"):
            detail = "\n".join(["invalid BridgeJob:"] + [f"  {e}" for e in body["errors"]])
        raise ApiFailure(f"{name}: {detail}" if name != "SchemaError" else detail,
                         ERROR_EXITS.get(name, EXIT_UNAVAILABLE))

    def _send(self, method: str, path: str, **kw) -> dict:
        try:
            return self._check(self.http.request(method, path, **kw))
        except httpx.TransportError as exc:
            raise ApiFailure(f"cannot reach operator at {self.http.base_url}: {exc.__class__.__name__}",
                             EXIT_UNAVAILABLE) from None

    def create(self, document: str, namespace: Optional[str]) -> dict:
        params = {"namespace": namespace} if namespace else {}
        return self._send("POST", "/v1/jobs", content=document.encode(), params=params,
                          headers={"content-type": "application/yaml"})

    def status(self, ns: str, name: str) -> dict:
        return self._send("GET", f"/v1/jobs/{ns}/{name}")

    def watch(self, ns: str, name: str):
        """Yield status snapshots until the job ends or is deleted."""
        try:
            with self.http.stream("GET", f"/v1/jobs/{ns}/{name}", params={"watch": "true"},
                                  timeout=httpx.Timeout(30.0, read=None)) as response:
                if not response.is_success:
                    response.read()
                    self._check(response)
                for line in response.iter_lines():
                    if line.strip():
                        yield json.loads(line)
        except httpx.TransportError as exc:
            raise ApiFailure(f"lost connection to operator: {exc.__class__.__name__}", EXIT_UNAVAILABLE) from None

    def kill(self, ns: str, name: str) -> dict:
        return self._send("POST", f"/v1/jobs/{ns}/{name}/kill")

    def delete(self, ns: str, name: str) -> dict:
        return self._send("DELETE", f"/v1/jobs/{ns}/{name}")


def split_key(key: str, namespace: Optional[str]) -> tuple[str, str]:
    if "/" in key:
        ns, _, name = key.partition("/")
        return ns, name
    return namespace or DEFAULT_NAMESPACE, key


def render(status: dict) -> str:
    if status.get("deleted"):
        return f"{status['namespace']}/{status['name']} deleted"
    line = (f"{status['namespace']}/{status['name']} {status['state']} "
            f"start={status.get('startTime') or '-'} end={status.get('endTime') or '-'}")
    if status.get("message"):
        line += f" message={json.dumps(status['message'])}"
    return line


def _emit(ctx: click.Context, status: dict) -> None:
    click.echo(json.dumps(status, sort_keys=True) if ctx.obj["json"] else render(status))


def _read_document(path: str, namespace: Optional[str]):
    text = Path(path).read_text() if path != "-" else sys.stdin.read()
    try:
        spec = parse_spec(text, namespace=namespace)
    except SchemaError as exc:
        raise ApiFailure("\n".join(["invalid BridgeJob:"] + [f"  {e}" for e in exc.errors]), EXIT_SCHEMA)
    return text, spec


@click.group()
@click.option("--endpoint", envvar="BRIDGE_ENDPOINT", default=DEFAULT_ENDPOINT, show_default=True,
              help="Operator admin API base URL.")
@click.option("--namespace", "-n", default=None, help="Namespace for job names without one.")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of text.")
@click.pass_context
def main(ctx: click.Context, endpoint: str, namespace: Optional[str], as_json: bool) -> None:
    ctx.ensure_object(dict)
    ctx.obj.update(endpoint=endpoint, namespace=namespace, json=as_json)


def _client(ctx: click.Context) -> Client:
    return Client(ctx.obj["endpoint"])


@main.command()
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False, allow_dash=True))
@click.pass_context
def submit(ctx: click.Context, spec_file: str) -> None:
    """Create a job from a BridgeJob file."""
    text, _ = _read_document(spec_file, ctx.obj["namespace"])
    created = _client(ctx).create(text, ctx.obj["namespace"])
    if ctx.obj["json"]:
        click.echo(json.dumps(created, sort_keys=True))
    else:
        click.echo(f"{created['namespace']}/{created['name']} created")


@main.command()
@click.argument("key")
@click.option("--watch", "-w", is_flag=True, help="Stream updates until the job ends.")
@click.pass_context
def status(ctx: click.Context, key: str, watch: bool) -> None:
    """Show a job's state as NAMESPACE/NAME or NAME."""
    ns, name = split_key(key, ctx.obj["namespace"])
    client = _client(ctx)
    if not watch:
        _emit(ctx, client.status(ns, name))
        return
    for snapshot in client.watch(ns, name):
        _emit(ctx, snapshot)


@main.command()
@click.argument("key")
@click.pass_context
def kill(ctx: click.Context, key: str) -> None:
    """Ask the worker to cancel the remote job."""
    ns, name = split_key(key, ctx.obj["namespace"])
    _client(ctx).kill(ns, name)
    click.echo(f"{ns}/{name} kill requested")


@main.command()
@click.argument("key")
@click.pass_context
def delete(ctx: click.Context, key: str) -> None:
    """Stop the job's worker and remove its record."""
    ns, name = split_key(key, ctx.obj["namespace"])
    _client(ctx).delete(ns, name)
    click.echo(f"{ns}/{name} deleted")


@main.command()
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False, allow_dash=True))
@click.pass_context
def pipeline(ctx: click.Context, spec_file: str) -> None:
    """Create the job, wait for it to finish, then always delete it.

    Every run starts from a fresh record; nothing from an earlier run is reused.
    """
    text, spec = _read_document(spec_file, ctx.obj["namespace"])
    ns, name = spec.namespace, spec.name
    client = _client(ctx)
    code = EXIT_REMOTE_FAILED
    failure: Optional[ApiFailure] = None
    try:
        client.create(text, ctx.obj["namespace"])
        click.echo(f"create: {ns}/{name} created")
        final = None
        for snapshot in client.watch(ns, name):
            final = snapshot
            click.echo(f"invoke: {render(snapshot)}")
        if final is not None and final.get("state") == "DONE":
            code = EXIT_OK
    except ApiFailure as exc:
        failure = exc
    finally:
        try:
            client.delete(ns, name)
            click.echo(f"cleanup: {ns}/{name} deleted")
        except ApiFailure as exc:
            click.echo(f"cleanup failed: {exc.message}", err=True)
            failure = failure or exc
    if failure is not None:
        raise failure
    ctx.exit(code)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True, type=int)
@click.option("--state-dir", default="state", show_default=True, type=click.Path(file_okay=False))
@click.option("--spool-dir", default="specs", show_default=True, type=click.Path(file_okay=False),
              help="Drop BridgeJob files here to create jobs; remove them to delete.")
@click.option("--credentials-dir", default="/credentials", show_default=True)
@click.option("--s3-credentials-dir", default="/s3credentials", show_default=True)
@click.option("--downloads-dir", default="downloads", show_default=True)
@click.option("--process-workers", is_flag=True, help="Run each worker as a separate OS process.")
@click.option("--time-scale", type=float, default=None, help="Speed factor for worker sleeps (process workers).")
@click.option("--log-level", default="INFO", show_default=True)
def serve(host, port, state_dir, spool_dir, credentials_dir, s3_credentials_dir, downloads_dir,
          process_workers, time_scale, log_level) -> None:
    """Run the operator and its admin API."""
    import uvicorn

    from .clock import ScaledClock, WallClock
    from .launchers import ProcessLauncher, ThreadLauncher
    from .reconciler import Operator
    from .service import create_app
    from .statestore import FileStore

    logging.basicConfig(level=log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    store = FileStore(state_dir)
    clock = ScaledClock(time_scale) if time_scale else WallClock()
    if process_workers:
        launcher = ProcessLauncher(state_dir, credentials_dir, s3_credentials_dir, downloads_dir, time_scale)
        operator = Operator(store, launcher, clock=clock, spool_dir=spool_dir, refresh_interval=0.2)
    else:
        launcher = ThreadLauncher(store, clock, credentials_dir, s3_credentials_dir, downloads_dir)
        operator = Operator(store, launcher, clock=clock, spool_dir=spool_dir)
    operator.start()
    try:
        uvicorn.run(create_app(operator), host=host, port=port, log_level=log_level.lower())
    finally:
        operator.stop()
        store.close()


@main.command()
@click.argument("kind", type=click.Choice(["slurm", "lsf", "s3"]))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8081, show_default=True, type=int)
@click.option("--pending", type=float, default=1.0, show_default=True, help="Seconds a job stays pending.")
@click.option("--running", type=float, default=2.0, show_default=True, help="Seconds a job stays running.")
@click.option("--final-state", type=click.Choice(["COMPLETED", "FAILED"]), default="COMPLETED", show_default=True)
@click.option("--fault-plan", default=None, help='Initial faults as JSON, e.g. {"drop_next": 3}.')
def mock(kind, host, port, pending, running, final_state, fault_plan) -> None:
    """Serve a mock resource manager or object store (for testing only)."""
    import uvicorn

    from .mocks import FaultPlan, MockConfig, ObjectStoreMock, ResourceManagerMock
    from .mocks import create_objectstore_app, create_resource_app

    plan = FaultPlan.model_validate_json(fault_plan) if fault_plan else None
    if kind == "s3":
        app = create_objectstore_app(ObjectStoreMock(faults=plan))
    else:
        config = MockConfig(pending_s=pending, running_s=running, final_state=final_state)
        app = create_resource_app(ResourceManagerMock(kind, config=config, faults=plan))
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
def worker() -> None:
    """Run one worker using NAMESPACE and JOBNAME from the environment."""
    from .worker import main as worker_main

    sys.exit(worker_main())


if __name__ == "__main__":
    main()
