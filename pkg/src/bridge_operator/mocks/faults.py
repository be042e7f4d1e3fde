"""Fault injection and request logging shared by every mock."""

from __future__ import annotations

import asyncio
import threading
from dataclasses import asdict, dataclass

from pydantic import BaseModel, Field

# Paths under these prefixes are test controls: never faulted, never logged.
CONTROL_PREFIXES = ("/_mock/faults", "/_mock/advance", "/_mock/requests", "/_mock/config",
                    "/_mock/jobs", "/_mock/objects")


class FaultPlan(BaseModel):
    drop_next: int = Field(0, ge=0, description="fail this many requests with a dropped connection")
    reject_submits: bool = False
    latency_ms: int = Field(0, ge=0)


class ConnectionDropped(Exception):
    pass


@dataclass(frozen=True)
class RequestLogEntry:
    time: float
    method: str
    path: str
    status: int  # 0 for dropped connections


class FaultState:
    def __init__(self, clock, plan: FaultPlan | None = None):
        self.clock = clock
        self.plan = plan or FaultPlan()
        self._lock = threading.Lock()
        self._log: list[RequestLogEntry] = []

    def set_plan(self, plan: FaultPlan) -> None:
        with self._lock:
            self.plan = plan.model_copy()

    def take_drop(self) -> bool:
        with self._lock:
            if self.plan.drop_next > 0:
                self.plan.drop_next -= 1
                return True
            return False

    def record(self, method: str, path: str, status: int, when: float) -> None:
        with self._lock:
            self._log.append(RequestLogEntry(when, method, path, status))

    def requests(self) -> list[RequestLogEntry]:
        with self._lock:
            return list(self._log)

    def clear(self) -> None:
        with self._lock:
            self._log.clear()

    def log_as_dicts(self) -> list[dict]:
        return [asdict(e) for e in self.requests()]


class FaultMiddleware:
    """Applies the current FaultPlan to non-control requests and logs them.

    A dropped request gets response headers promising a body that never
    arrives, so the client sees the connection die mid-response.
    """

    def __init__(self, app, faults: FaultState):
        self.app = app
        self.faults = faults

    async def __call__(self, scope, receive, send):
        if scope["type"] != "http" or scope["path"].startswith(CONTROL_PREFIXES):
            await self.app(scope, receive, send)
            return
        when = self.faults.clock.now()
        method, path = scope["method"], scope["path"]
        latency = self.faults.plan.latency_ms
        if latency:
            await asyncio.sleep(latency / 1000)
        if self.faults.take_drop():
            self.faults.record(method, path, 0, when)
            await send({"type": "http.response.start", "status": 200,
                        "headers": [(b"content-length", b"64")]})
            raise ConnectionDropped(f"{method} {path}")
        logged = False

        async def capture(message):
            nonlocal logged
            # Log before the client can see the response, so the log never lags what clients observed.
            if message["type"] == "http.response.start" and not logged:
                logged = True
                self.faults.record(method, path, message["status"], when)
            await send(message)

        try:
            await self.app(scope, receive, capture)
        finally:
            if not logged:
                self.faults.record(method, path, 500, when)
