"""Scriptable Slurm-style and LSF-style resource managers.

Jobs follow a configured timeline (pending for ``pending_s``, running for
``running_s``, then ``final_state``) measured on an injectable clock, so a
test that steps a virtual clock sees the same transitions every run.
State is advanced lazily from the clock on every request.
"""

from __future__ import annotations

import hashlib
import posixpath
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Literal, Optional

from fastapi import APIRouter, FastAPI, Header, HTTPException, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..clock import VirtualClock, WallClock
from .faults import FaultMiddleware, FaultPlan, FaultState

SLURM_API = "/slurm/v0.0.37"
LSF_API = "/platform/ws"

PENDING, RUNNING, COMPLETED, FAILED, CANCELLED = "PENDING", "RUNNING", "COMPLETED", "FAILED", "CANCELLED"
TERMINAL = {COMPLETED, FAILED, CANCELLED}

VOCABULARY = {
    "slurm": {PENDING: "PENDING", RUNNING: "RUNNING", COMPLETED: "COMPLETED", FAILED: "FAILED",
              CANCELLED: "CANCELLED"},
    "lsf": {PENDING: "PEND", RUNNING: "RUN", COMPLETED: "DONE", FAILED: "EXIT", CANCELLED: "EXIT"},
}

DEFAULT_OUTPUT_TEMPLATE = "job {id} ({name}) finished with state {state}\n"


class MockConfig(BaseModel):
    pending_s: float = Field(1.0, ge=0)
    running_s: float = Field(2.0, ge=0)
    final_state: Literal["COMPLETED", "FAILED"] = "COMPLETED"
    # Output files rendered for every job on reaching a terminal state: path -> template.
    outputs: dict[str, str] = Field(default_factory=dict)
    output_template: str = DEFAULT_OUTPUT_TEMPLATE
    users: dict[str, str] = Field(default_factory=lambda: {"bridge": "bridge-token"})


@dataclass
class MockJob:
    id: int
    name: str
    submitted_at: float
    pending_s: float
    running_s: float
    final_state: str
    payload: dict
    state: str = PENDING
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    outputs: dict[str, bytes] = field(default_factory=dict)
    output_paths: tuple[str, ...] = ()

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL


class ResourceManagerMock:
    def __init__(self, flavor: Literal["slurm", "lsf"] = "slurm", clock=None,
                 config: Optional[MockConfig] = None, faults: Optional[FaultPlan] = None):
        if flavor not in VOCABULARY:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.flavor = flavor
        self.clock = clock or WallClock()
        self.config = config or MockConfig()
        self.faults = FaultState(self.clock, faults)
        self._lock = threading.RLock()
        self.jobs: dict[int, MockJob] = {}
        self.sharedfs: dict[str, bytes] = {}
        self.sessions: dict[str, str] = {}
        self.submit_requests = 0
        self._next_id = 1

    # -- state machine -----------------------------------------------------

    def configure(self, config: MockConfig) -> None:
        with self._lock:
            self.config = config

    def vocab(self, state: str) -> str:
        return VOCABULARY[self.flavor][state]

    def submit(self, name: str, payload: dict, output_paths: tuple[str, ...] = ()) -> tuple[int, bool]:
        """Register a job; a repeated ``name`` returns the existing job's id."""
        with self._lock:
            self.submit_requests += 1
            self.advance(self.clock.now())
            for job in self.jobs.values():
                if job.name == name:
                    return job.id, False
            job = MockJob(
                id=self._next_id,
                name=name,
                submitted_at=self.clock.now(),
                pending_s=self.config.pending_s,
                running_s=self.config.running_s,
                final_state=self.config.final_state,
                payload=payload,
                output_paths=tuple(p for p in output_paths if p),
            )
            self._next_id += 1
            self.jobs[job.id] = job
            return job.id, True

    def advance(self, now: float) -> None:
        with self._lock:
            for job in self.jobs.values():
                if job.state == PENDING and now >= job.submitted_at + job.pending_s:
                    job.state = RUNNING
                    job.start_time = job.submitted_at + job.pending_s
                if job.state == RUNNING and now >= job.start_time + job.running_s:
                    self._finish(job, job.final_state, job.start_time + job.running_s)

    def _finish(self, job: MockJob, state: str, when: float) -> None:
        job.state = state
        job.end_time = when
        names = dict.fromkeys(job.output_paths)
        names.update(dict.fromkeys(self.config.outputs))
        for path in names:
            template = self.config.outputs.get(path, self.config.output_template)
            job.outputs[path.lstrip("/")] = template.format(
                id=job.id, name=job.name, state=self.vocab(state), path=path).encode()

    def kill(self, job_id: int) -> MockJob:
        with self._lock:
            self.advance(self.clock.now())
            job = self.jobs[job_id]
            if not job.terminal:
                self._finish(job, CANCELLED, self.clock.now())
            return job

    def get(self, job_id: int) -> MockJob:
        with self._lock:
            self.advance(self.clock.now())
            return self.jobs[job_id]

    def find(self, name: Optional[str] = None) -> list[MockJob]:
        with self._lock:
            self.advance(self.clock.now())
            return [j for j in self.jobs.values() if name is None or j.name == name]

    def shared_output(self, job_id: int, path: str) -> bytes:
        """Output file of a finished job (KeyError: unknown; RuntimeError: still running)."""
        with self._lock:
            job = self.get(job_id)
            if not job.terminal:
                raise RuntimeError("job is not terminal")
            path = path.lstrip("/")
            if path in job.outputs:
                return job.outputs[path]
            if path in self.sharedfs:
                return self.sharedfs[path]
            raise KeyError(path)

    def logon(self, username: str, password: str) -> Optional[str]:
        with self._lock:
            if self.config.users.get(username) != password:
                return None
            digest = hashlib.sha256(f"{username}:{len(self.sessions)}".encode()).hexdigest()[:24]
            token = f"sess-{digest}"
            self.sessions[token] = username
            return token

    def authorized(self, username: Optional[str], token: Optional[str]) -> bool:
        return bool(username) and self.config.users.get(username) == token

    def effective_jobs(self, name: str) -> int:
        return len(self.find(name))

    def snapshot(self, job: MockJob) -> dict[str, Any]:
        return {
            "id": job.id,
            "name": job.name,
            "state": self.vocab(job.state),
            "submitted_at": job.submitted_at,
            "start_time": job.start_time,
            "end_time": job.end_time,
            "payload": job.payload,
            "outputs": {k: v.decode(errors="replace") for k, v in job.outputs.items()},
        }


def _epoch(ts: Optional[float]) -> int:
    return int(ts) if ts is not None else 0


def _lsf_time(ts: Optional[float]) -> str:
    if ts is None:
        return ""
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


def _control_router(mock: ResourceManagerMock) -> APIRouter:
    router = APIRouter(prefix="/_mock", tags=["test controls"])

    @router.post("/faults")
    def set_faults(plan: FaultPlan):
        mock.faults.set_plan(plan)
        return plan

    @router.post("/advance")
    def advance(body: dict):
        if not isinstance(mock.clock, VirtualClock):
            raise HTTPException(409, "mock runs on the wall clock")
        mock.clock.advance(float(body.get("seconds", 0)))
        mock.advance(mock.clock.now())
        return {"now": mock.clock.now()}

    @router.get("/requests")
    def requests_log():
        return mock.faults.log_as_dicts()

    @router.delete("/requests")
    def clear_requests():
        mock.faults.clear()
        return {}

    @router.post("/config")
    def configure(config: MockConfig):
        mock.configure(config)
        return config

    @router.get("/jobs")
    def jobs():
        return [mock.snapshot(j) for j in mock.find()]

    @router.get("/jobs/{job_id}")
    def job(job_id: int):
        try:
            return mock.snapshot(mock.get(job_id))
        except KeyError:
            raise HTTPException(404, "no such job") from None

    return router


def _shared_routes(app: FastAPI, mock: ResourceManagerMock, check_auth) -> None:
    # Emulates the cluster's shared filesystem for managers without file transfer.

    @app.get("/_mock/shared/{job_id}/{path:path}")
    def shared_output(job_id: int, path: str, request: Request):
        check_auth(request)
        try:
            return Response(mock.shared_output(job_id, path), media_type="application/octet-stream")
        except RuntimeError:
            raise HTTPException(409, "job is not terminal") from None
        except KeyError:
            raise HTTPException(404, "no such file") from None

    @app.put("/_mock/sharedfs/{path:path}")
    async def put_shared(path: str, request: Request):
        check_auth(request)
        mock.sharedfs[posixpath.normpath(path).lstrip("/")] = await request.body()
        return {"path": path}

    @app.get("/_mock/sharedfs/{path:path}")
    def get_shared(path: str, request: Request):
        check_auth(request)
        content = mock.sharedfs.get(posixpath.normpath(path).lstrip("/"))
        if content is None:
            raise HTTPException(404, "no such file")
        return Response(content, media_type="application/octet-stream")


def create_slurm_app(mock: ResourceManagerMock) -> FastAPI:
    app = FastAPI(title="mock slurmrestd")

    def check_auth(request: Request) -> None:
        if not mock.authorized(request.headers.get("x-slurm-user-name"), request.headers.get("x-slurm-user-token")):
            raise HTTPException(401, "authentication failure")

    def job_json(job: MockJob) -> dict:
        body = job.payload.get("job", {})
        return {
            "job_id": job.id,
            "name": job.name,
            "job_state": mock.vocab(job.state),
            "partition": body.get("partition", ""),
            "submit_time": _epoch(job.submitted_at),
            "start_time": _epoch(job.start_time),
            "end_time": _epoch(job.end_time),
            "standard_output": body.get("standard_output", ""),
            "standard_error": body.get("standard_error", ""),
        }

    @app.get(f"{SLURM_API}/ping")
    def ping(request: Request):
        check_auth(request)
        return {"pings": [{"hostname": "mock", "ping": "UP", "status": 0}], "errors": []}

    @app.post(f"{SLURM_API}/job/submit")
    def submit(payload: dict, request: Request):
        check_auth(request)
        if mock.faults.plan.reject_submits:
            return JSONResponse({"errors": [{"error": "submission rejected", "error_number": 2}]}, 500)
        job = payload.get("job")
        if not isinstance(job, dict) or not job.get("name") or not payload.get("script"):
            return JSONResponse({"errors": [{"error": "job and script are required"}]}, 400)
        for int_field in ("nodes", "ntasks"):
            if int_field in job and not isinstance(job[int_field], int):
                return JSONResponse({"errors": [{"error": f"{int_field} must be an integer"}]}, 400)
        job_id, _ = mock.submit(job["name"], payload,
                                (job.get("standard_output", ""), job.get("standard_error", "")))
        return {"job_id": job_id, "step_id": "batch", "errors": []}

    @app.get(f"{SLURM_API}/jobs")
    def list_jobs(request: Request):
        check_auth(request)
        return {"jobs": [job_json(j) for j in mock.find()], "errors": []}

    @app.get(f"{SLURM_API}/job/{{job_id}}")
    def get_job(job_id: int, request: Request):
        check_auth(request)
        try:
            return {"jobs": [job_json(mock.get(job_id))], "errors": []}
        except KeyError:
            return JSONResponse({"jobs": [], "errors": [{"error": "Invalid job id specified"}]}, 404)

    @app.delete(f"{SLURM_API}/job/{{job_id}}")
    def cancel_job(job_id: int, request: Request):
        check_auth(request)
        try:
            mock.kill(job_id)
        except KeyError:
            return JSONResponse({"errors": [{"error": "Invalid job id specified"}]}, 404)
        return {"errors": []}

    _shared_routes(app, mock, check_auth)
    app.include_router(_control_router(mock))
    app.state.mock = mock
    return FaultMiddleware(app, mock.faults)


def create_lsf_app(mock: ResourceManagerMock) -> FastAPI:
    app = FastAPI(title="mock LSF application center")

    def check_auth(request: Request) -> str:
        user = mock.sessions.get(request.cookies.get("platform_token", ""))
        if user is None:
            raise HTTPException(401, "not logged on")
        return user

    def job_json(job: MockJob) -> dict:
        return {
            "id": str(job.id),
            "name": job.name,
            "status": mock.vocab(job.state),
            "queue": job.payload.get("params", {}).get("queue", ""),
            "submitTime": _lsf_time(job.submitted_at),
            "startTime": _lsf_time(job.start_time),
            "endTime": _lsf_time(job.end_time),
        }

    @app.post(f"{LSF_API}/logon")
    def logon(body: dict):
        token = mock.logon(str(body.get("username", "")), str(body.get("password", "")))
        if token is None:
            raise HTTPException(401, "bad username or password")
        response = JSONResponse({"user": body["username"]})
        response.set_cookie("platform_token", token)
        return response

    @app.post(f"{LSF_API}/jobs/submit")
    def submit(payload: dict, request: Request):
        check_auth(request)
        if mock.faults.plan.reject_submits:
            return JSONResponse({"error": "submission rejected"}, 500)
        if not payload.get("name") or not (payload.get("script") or payload.get("command")):
            return JSONResponse({"error": "name and script or command are required"}, 400)
        params = payload.get("params") or {}
        job_id, _ = mock.submit(payload["name"], payload,
                                (params.get("output_file", ""), params.get("error_file", "")))
        return {"id": str(job_id)}

    @app.get(f"{LSF_API}/jobs")
    def list_jobs(request: Request, name: Optional[str] = None):
        check_auth(request)
        return {"jobs": [job_json(j) for j in mock.find(name)]}

    @app.get(f"{LSF_API}/jobs/{{job_id}}")
    def get_job(job_id: int, request: Request):
        check_auth(request)
        try:
            return job_json(mock.get(job_id))
        except KeyError:
            raise HTTPException(404, "no such job") from None

    @app.post(f"{LSF_API}/jobs/{{job_id}}/kill")
    def kill_job(job_id: int, request: Request):
        check_auth(request)
        try:
            return job_json(mock.kill(job_id))
        except KeyError:
            raise HTTPException(404, "no such job") from None

    @app.get(f"{LSF_API}/jobfiles/{{job_id}}/{{path:path}}")
    def job_file(job_id: int, path: str, request: Request):
        check_auth(request)
        try:
            return Response(mock.shared_output(job_id, path), media_type="application/octet-stream")
        except RuntimeError:
            raise HTTPException(409, "job is not terminal") from None
        except KeyError:
            raise HTTPException(404, "no such file") from None

    @app.put(f"{LSF_API}/files/{{path:path}}")
    async def upload(path: str, request: Request):
        check_auth(request)
        mock.sharedfs[posixpath.normpath(path).lstrip("/")] = await request.body()
        return {"path": path}

    _shared_routes(app, mock, lambda request: check_auth(request))
    app.include_router(_control_router(mock))
    app.state.mock = mock
    return FaultMiddleware(app, mock.faults)


def create_resource_app(mock: ResourceManagerMock):
    return create_slurm_app(mock) if mock.flavor == "slurm" else create_lsf_app(mock)
