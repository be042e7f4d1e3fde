"""Slurm REST (slurmrestd v0.0.37 subset) adapter.

The Slurm API has no file transfer, so staged inputs and job outputs go
through the shared-filesystem endpoints the bundled mock exposes, which
stand in for a cluster filesystem visible to the submitting user.
"""

from __future__ import annotations

from typing import Mapping, Optional
from urllib.parse import quote

import httpx

from ..errors import AdapterError, FileMissing, NotFoundRemote, SubmitRejected
from ..jobspec import AdapterKind
from .base import (
    REQUEST_TIMEOUT,
    RemoteJobInfo,
    ResourceAdapter,
    Script,
    ScriptBody,
    Session,
    translate_properties,
    wrap_remote_path,
)
from .credentials import CredentialSet

API = "/slurm/v0.0.37"


class SlurmAdapter(ResourceAdapter):
    kind = AdapterKind.SLURM
    supports_file_transfer = False

    def __init__(self, resource_url: str, timeout: float = REQUEST_TIMEOUT,
                 transport: Optional[httpx.BaseTransport] = None, shared_fs_url: Optional[str] = None):
        super().__init__(resource_url, timeout, transport)
        self.shared_fs_url = (shared_fs_url or self.resource_url).rstrip("/")

    @staticmethod
    def _headers(session: Session) -> dict[str, str]:
        return {"X-SLURM-USER-NAME": session.username, "X-SLURM-USER-TOKEN": session.token}

    def get_token(self, credentials: CredentialSet) -> Session:
        session = Session(credentials.username, credentials.token)
        response = self._request("GET", f"{API}/ping", headers=self._headers(session))
        if response.status_code != 200:
            raise AdapterError(f"slurm ping returned {response.status_code}")
        return session

    def submit(self, session, script: Script, properties: Mapping[str, str], client_name: str,
               environment: Optional[Mapping[str, str]] = None) -> str:
        job = translate_properties(properties, self.manifest)
        job["name"] = client_name
        env = job.setdefault("environment", {})
        env.setdefault("PATH", "/bin:/usr/bin")
        env.update(environment or {})
        body = script.text if isinstance(script, ScriptBody) else wrap_remote_path(script.path)
        response = self._request("POST", f"{API}/job/submit", headers=self._headers(session),
                                 json={"job": job, "script": body})
        payload = self._json(response) if response.content else {}
        errors = payload.get("errors") if isinstance(payload, dict) else None
        job_id = payload.get("job_id") if isinstance(payload, dict) else None
        if response.status_code >= 400 or errors or not job_id:
            raise SubmitRejected(f"slurm refused the job (HTTP {response.status_code})")
        return str(job_id)

    def find_job(self, session, client_name: str) -> Optional[str]:
        response = self._request("GET", f"{API}/jobs", headers=self._headers(session))
        if response.status_code != 200:
            raise AdapterError(f"slurm job listing returned {response.status_code}")
        ids = [int(j["job_id"]) for j in self._json(response).get("jobs", []) if j.get("name") == client_name]
        return str(min(ids)) if ids else None

    def get_job_info(self, session, remote_id: str) -> RemoteJobInfo:
        response = self._request("GET", f"{API}/job/{remote_id}", headers=self._headers(session))
        if response.status_code == 404:
            raise NotFoundRemote(f"slurm has no job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"slurm job query returned {response.status_code}")
        jobs = self._json(response).get("jobs") or []
        if not jobs:
            raise NotFoundRemote(f"slurm has no job {remote_id}")
        job = jobs[0]
        return RemoteJobInfo(
            remote_id=str(job["job_id"]),
            remote_state=str(job.get("job_state") or "UNKNOWN"),
            start_time=float(job["start_time"]) if job.get("start_time") else None,
            end_time=float(job["end_time"]) if job.get("end_time") else None,
            raw=job,
        )

    def kill(self, session, remote_id: str) -> None:
        response = self._request("DELETE", f"{API}/job/{remote_id}", headers=self._headers(session))
        if response.status_code == 404:
            raise NotFoundRemote(f"slurm has no job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"slurm cancel returned {response.status_code}")

    def fetch_output(self, session, remote_id: str, remote_path: str) -> bytes:
        url = f"{self.shared_fs_url}/_mock/shared/{remote_id}/{quote(remote_path.lstrip('/'))}"
        response = self._request("GET", url, headers=self._headers(session))
        if response.status_code == 404:
            raise FileMissing(f"{remote_path} not found for job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"shared output fetch returned {response.status_code}")
        return response.content

    def upload_file(self, session, remote_path: str, content: bytes) -> str:
        url = f"{self.shared_fs_url}/_mock/sharedfs/{quote(remote_path.lstrip('/'))}"
        response = self._request("PUT", url, headers=self._headers(session), content=content)
        if response.status_code not in (200, 201):
            raise AdapterError(f"shared filesystem upload returned {response.status_code}")
        return remote_path
