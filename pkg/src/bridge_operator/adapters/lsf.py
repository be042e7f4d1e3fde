"""LSF Application Center web-services adapter (job and file subset)."""

from __future__ import annotations

from datetime import datetime, timezone
from typing import Mapping, Optional
from urllib.parse import quote

import httpx

from ..errors import AdapterError, AuthError, FileMissing, NotFoundRemote, SubmitRejected, Unreachable
from ..jobspec import AdapterKind
from .base import RemoteJobInfo, ResourceAdapter, Script, ScriptBody, Session, translate_properties
from .credentials import CredentialSet

API = "/platform/ws"
COOKIE = "platform_token"
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"


def parse_lsf_time(value) -> Optional[float]:
    if not value:
        return None
    return datetime.strptime(str(value), TIME_FORMAT).replace(tzinfo=timezone.utc).timestamp()


class LSFAdapter(ResourceAdapter):
    kind = AdapterKind.LSF
    supports_file_transfer = True

    @staticmethod
    def _headers(session: Session) -> dict[str, str]:
        return {"Cookie": f"{COOKIE}={session.token}"}

    def get_token(self, credentials: CredentialSet) -> Session:
        # A throwaway client keeps the session cookie out of the shared client's jar.
        try:
            with httpx.Client(base_url=self.resource_url, timeout=self.timeout, transport=self._transport) as client:
                response = client.post(f"{API}/logon", json={"username": credentials.username,
                                                              "password": credentials.token})
        except httpx.TransportError as exc:
            raise Unreachable(f"lsf: logon failed: {exc.__class__.__name__}") from None
        if response.status_code in (401, 403):
            raise AuthError(f"lsf: logon refused for user {credentials.username!r}")
        token = response.cookies.get(COOKIE)
        if response.status_code != 200 or not token:
            raise AdapterError(f"lsf: logon returned {response.status_code} without a session")
        return Session(credentials.username, token)

    def submit(self, session, script: Script, properties: Mapping[str, str], client_name: str,
               environment: Optional[Mapping[str, str]] = None) -> str:
        payload = translate_properties(properties, self.manifest)
        payload["name"] = client_name
        payload.setdefault("params", {})
        payload.setdefault("env", {}).update(environment or {})
        if isinstance(script, ScriptBody):
            payload["script"] = script.text
        else:
            payload["command"] = script.path
        response = self._request("POST", f"{API}/jobs/submit", headers=self._headers(session), json=payload)
        body = self._json(response) if response.content else {}
        job_id = body.get("id") if isinstance(body, dict) else None
        if response.status_code >= 400 or not job_id or str(job_id) == "0":
            raise SubmitRejected(f"lsf refused the job (HTTP {response.status_code})")
        return str(job_id)

    def find_job(self, session, client_name: str) -> Optional[str]:
        response = self._request("GET", f"{API}/jobs", headers=self._headers(session), params={"name": client_name})
        if response.status_code != 200:
            raise AdapterError(f"lsf job listing returned {response.status_code}")
        ids = [int(j["id"]) for j in self._json(response).get("jobs", []) if j.get("name") == client_name]
        return str(min(ids)) if ids else None

    def get_job_info(self, session, remote_id: str) -> RemoteJobInfo:
        response = self._request("GET", f"{API}/jobs/{remote_id}", headers=self._headers(session))
        if response.status_code == 404:
            raise NotFoundRemote(f"lsf has no job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"lsf job query returned {response.status_code}")
        job = self._json(response)
        return RemoteJobInfo(
            remote_id=str(job["id"]),
            remote_state=str(job.get("status") or "UNKNOWN"),
            start_time=parse_lsf_time(job.get("startTime")),
            end_time=parse_lsf_time(job.get("endTime")),
            raw=job,
        )

    def kill(self, session, remote_id: str) -> None:
        response = self._request("POST", f"{API}/jobs/{remote_id}/kill", headers=self._headers(session))
        if response.status_code == 404:
            raise NotFoundRemote(f"lsf has no job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"lsf kill returned {response.status_code}")

    def fetch_output(self, session, remote_id: str, remote_path: str) -> bytes:
        response = self._request("GET", f"{API}/jobfiles/{remote_id}/{quote(remote_path.lstrip('/'))}",
                                 headers=self._headers(session))
        if response.status_code == 404:
            raise FileMissing(f"{remote_path} not found for job {remote_id}")
        if response.status_code != 200:
            raise AdapterError(f"lsf file download returned {response.status_code}")
        return response.content

    def upload_file(self, session, remote_path: str, content: bytes) -> str:
        response = self._request("PUT", f"{API}/files/{quote(remote_path.lstrip('/'))}",
                                 headers=self._headers(session), content=content)
        if response.status_code not in (200, 201):
            raise AdapterError(f"lsf file upload returned {response.status_code}")
        return remote_path
