"""Request and response bodies of the admin API."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from ..jobspec import BridgeState
from ..statestore import JobRecord


class JobStatusModel(BaseModel):
    namespace: str
    name: str
    state: BridgeState
    startTime: str = ""
    endTime: str = ""
    message: str = ""
    id: str = ""
    kill: bool = False
    version: int = Field(ge=1)

    @classmethod
    def from_record(cls, record: JobRecord) -> "JobStatusModel":
        d = record.data
        return cls(
            namespace=record.key[0],
            name=record.key[1],
            state=record.status,
            startTime=d.get("startTime", ""),
            endTime=d.get("endTime", ""),
            message=d.get("message", ""),
            id=d.get("id", ""),
            kill=d.get("kill") == "true",
            version=record.version,
        )


class CreatedModel(BaseModel):
    namespace: str
    name: str
    state: BridgeState = BridgeState.NEW


class ErrorModel(BaseModel):
    error: str
    detail: str
    errors: Optional[list[str]] = None


class JobListModel(BaseModel):
    jobs: list[JobStatusModel]
