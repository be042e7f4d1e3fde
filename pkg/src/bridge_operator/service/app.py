"""Admin HTTP API over an :class:`~bridge_operator.reconciler.Operator`.

Errors carry a machine-readable ``error`` name (``SchemaError``,
``AlreadyExists``, ``NotFound``, ``InvalidState``, ``StoreError``) that
the command-line client maps to its exit codes.
"""

from __future__ import annotations

import json
import time
from typing import Iterator, Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.concurrency import run_in_threadpool

from ..errors import AlreadyExists, InvalidState, NotFound, SchemaError, StoreError
from ..jobspec import parse_spec
from ..reconciler import Operator
from .models import CreatedModel, ErrorModel, JobListModel, JobStatusModel

WATCH_POLL_SECONDS = 0.1

def _error(status: int, exc: Exception, errors: Optional[list[str]] = None) -> JSONResponse:
    body = ErrorModel(error=type(exc).__name__, detail=str(exc), errors=errors)
    return JSONResponse(body.model_dump(exclude_none=True), status_code=status)

def create_app(operator: Operator, watch_poll: float = WATCH_POLL_SECONDS) -> FastAPI:
    app = FastAPI(title="bridge operator admin API")
    app.state.operator = operator
    store = operator.store

    @app.exception_handler(SchemaError)
    async def _schema(_request, exc: SchemaError):
        return _error(422, exc, exc.errors)

    @app.exception_handler(AlreadyExists)
    async def _exists(_request, exc):
        return _error(409, exc)

    @app.exception_handler(InvalidState)
    async def _invalid(_request, exc):
        return _error(409, exc)

    @app.exception_handler(NotFound)
    async def _missing(_request, exc):
        return _error(404, exc)

    @app.exception_handler(StoreError)
    async def _store(_request, exc):
        return _error(503, exc)

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/v1/jobs", status_code=201, response_model=CreatedModel,
              responses={409: {"model": ErrorModel}, 422: {"model": ErrorModel}})
    async def create_job(request: Request, namespace: Optional[str] = Query(None)):
        raw = await request.body()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise SchemaError(["body: not UTF-8 text"]) from None
        spec = parse_spec(text, namespace=namespace)
        # The operator's calls block on its loop; keep them off the event loop thread.
        await run_in_threadpool(operator.reconcile_created, spec)
        return CreatedModel(namespace=spec.namespace, name=spec.name)

    @app.get("/v1/jobs", response_model=JobListModel)
    def list_jobs(namespace: Optional[str] = Query(None)):
        jobs = []
        for key in store.keys():
            if namespace and key[0] != namespace:
                continue
            try:
                jobs.append(JobStatusModel.from_record(store.get_record(key)))
            except NotFound:
                continue
        return JobListModel(jobs=jobs)

    @app.get("/v1/jobs/{namespace}/{name}", response_model=JobStatusModel,
             responses={404: {"model": ErrorModel}})
    def get_job(namespace: str, name: str, watch: bool = Query(False)):
        key = (namespace, name)
        first = store.get_record(key)
        if not watch:
            return JobStatusModel.from_record(first)
        return StreamingResponse(_stream(key), media_type="application/x-ndjson")

    def _stream(key) -> Iterator[str]:
        """One JSON line per observed version; ends at a terminal state or deletion."""
        last = 0
        while True:
            try:
                record = store.get_record(key)
            except NotFound:
                yield json.dumps({"namespace": key[0], "name": key[1], "deleted": True}) + "\n"
                return
            if record.version != last:
                last = record.version
                yield JobStatusModel.from_record(record).model_dump_json() + "\n"
                if record.status.terminal:
                    return
            time.sleep(watch_poll)

    @app.post("/v1/jobs/{namespace}/{name}/kill", response_model=JobStatusModel,
              responses={404: {"model": ErrorModel}, 409: {"model": ErrorModel}})
    def kill_job(namespace: str, name: str):
        operator.signal_kill((namespace, name))
        return JobStatusModel.from_record(store.get_record((namespace, name)))

    @app.delete("/v1/jobs/{namespace}/{name}")
    def delete_job(namespace: str, name: str):
        operator.reconcile_deleted((namespace, name))
        return {"namespace": namespace, "name": name, "deleted": True}

    return app
