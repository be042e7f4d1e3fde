"""The contract every resource-manager adapter implements."""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Optional, Union

import httpx

from ..errors import AdapterError, AuthError, SubmitRejected, Unreachable
from ..jobspec import AdapterKind, BridgeState
from .credentials import CredentialSet

log = logging.getLogger(__name__)

REQUEST_TIMEOUT = 5.0


@dataclass(frozen=True)
class ScriptBody:
    text: str


@dataclass(frozen=True)
class RemotePath:
    path: str


Script = Union[ScriptBody, RemotePath]


@dataclass(frozen=True)
class Session:
    """What ``get_token`` hands back: the identity plus a token for later calls."""

    username: str
    token: str = field(repr=False)

    def __repr__(self) -> str:
        return f"Session(username={self.username!r}, token=***)"


@dataclass(frozen=True)
class RemoteJobInfo:
    remote_id: str
    remote_state: str
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    raw: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.remote_id or not self.remote_state:
            raise ValueError("remote_id and remote_state must be non-empty")


SLURM_STATES = {
    "PENDING": BridgeState.SUBMITTED,
    "RUNNING": BridgeState.RUNNING,
    "COMPLETING": BridgeState.RUNNING,
    "COMPLETED": BridgeState.DONE,
    "CANCELLED": BridgeState.KILLED,
    "FAILED": BridgeState.FAILED,
    "TIMEOUT": BridgeState.FAILED,
    "NODE_FAIL": BridgeState.FAILED,
    "OUT_OF_MEMORY": BridgeState.FAILED,
}

LSF_STATES = {
    "PEND": BridgeState.SUBMITTED,
    "RUN": BridgeState.RUNNING,
    "DONE": BridgeState.DONE,
    "EXIT": BridgeState.FAILED,
    "USUSP": BridgeState.RUNNING,
    "PSUSP": BridgeState.RUNNING,
}

_STATE_TABLES = {AdapterKind.SLURM: SLURM_STATES, AdapterKind.LSF: LSF_STATES}


def map_remote_state(adapter_kind: AdapterKind | str, remote_state: str) -> BridgeState:
    table = _STATE_TABLES[AdapterKind(adapter_kind)]
    if not isinstance(remote_state, str):
        return BridgeState.UNKNOWN
    return table.get(remote_state.strip().upper(), BridgeState.UNKNOWN)


def load_manifest(kind: AdapterKind | str) -> dict[str, dict[str, str]]:
    text = resources.files(__package__).joinpath("manifests", f"{AdapterKind(kind).value}.json").read_text()
    manifest = json.loads(text)
    return {k: ({"field": v} if isinstance(v, str) else v) for k, v in manifest.items()}


def translate_properties(properties: Mapping[str, str], manifest: Mapping[str, Mapping[str, str]]) -> dict[str, Any]:
    """Map BridgeJob property names onto a manager payload.

    Dotted target fields nest (``environment.LD_LIBRARY_PATH``). Values stay
    strings unless the manifest says ``"type": "int"``; a value that does
    not convert is a submission error.
    """
    payload: dict[str, Any] = {}
    for name, value in properties.items():
        rule = manifest.get(name)
        if rule is None:
            log.warning("ignoring job property %r: no translation for this manager", name)
            continue
        if rule.get("type") == "int":
            try:
                converted: Any = int(str(value).strip())
            except ValueError:
                raise SubmitRejected(f"job property {name}={value!r} is not an integer") from None
        else:
            converted = str(value)
        target = payload
        *parents, leaf = rule["field"].split(".")
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = converted
    return payload


def wrap_remote_path(path: str) -> str:
    return f"#!/bin/sh\nexec {path}\n"


class ResourceAdapter(ABC):
    kind: AdapterKind
    supports_file_transfer: bool = False

    def __init__(self, resource_url: str, timeout: float = REQUEST_TIMEOUT, transport: Optional[httpx.BaseTransport] = None):
        self.resource_url = resource_url.rstrip("/")
        self.timeout = timeout
        self._transport = transport
        self._client = httpx.Client(base_url=self.resource_url, timeout=timeout, transport=transport)
        self.manifest = load_manifest(self.kind)

    def close(self) -> None:
        self._client.close()

    def map_state(self, remote_state: str) -> BridgeState:
        return map_remote_state(self.kind, remote_state)

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            response = self._client.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            # Only the method and path go into the message; headers carry secrets.
            raise Unreachable(f"{self.kind.value}: {method} {path} failed: {exc.__class__.__name__}") from None
        if response.status_code in (401, 403):
            raise AuthError(f"{self.kind.value}: {method} {path} was not authorized")
        return response

    @staticmethod
    def _json(response: httpx.Response) -> Any:
        try:
            return response.json()
        except ValueError:
            raise AdapterError(f"unexpected non-JSON reply ({response.status_code})") from None

    @abstractmethod
    def get_token(self, credentials: CredentialSet) -> Session: ...

    @abstractmethod
    def submit(
        self,
        session: Session,
        script: Script,
        properties: Mapping[str, str],
        client_name: str,
        environment: Optional[Mapping[str, str]] = None,
    ) -> str: ...

    @abstractmethod
    def find_job(self, session: Session, client_name: str) -> Optional[str]:
        """Remote id of a job previously submitted under ``client_name``, if any."""

    @abstractmethod
    def get_job_info(self, session: Session, remote_id: str) -> RemoteJobInfo: ...

    @abstractmethod
    def kill(self, session: Session, remote_id: str) -> None: ...

    @abstractmethod
    def fetch_output(self, session: Session, remote_id: str, remote_path: str) -> bytes: ...

    @abstractmethod
    def upload_file(self, session: Session, remote_path: str, content: bytes) -> str: ...
