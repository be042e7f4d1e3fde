"""Moving scripts, inputs and outputs between object storage and the remote resource."""

from __future__ import annotations

import hashlib
import logging
import posixpath
import shlex
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .adapters.base import RemotePath, ResourceAdapter, Script, ScriptBody, Session
from .adapters.credentials import load_s3_credentials
from .errors import DigestMismatch, StagingError
from .jobspec import BridgeJobSpec, ScriptLocation
from .storage import S3Client

log = logging.getLogger(__name__)

_DIGESTS = {32: "md5", 40: "sha1", 64: "sha256"}


@dataclass(frozen=True)
class ObjectRef:
    bucket: str
    key: str

    @classmethod
    def parse(cls, text: str) -> "ObjectRef":
        bucket, sep, key = text.partition(":")
        if not (sep and bucket and key):
            raise ValueError(f"{text!r} is not a <bucket>:<key> reference")
        return cls(bucket, key)

    def __str__(self) -> str:
        return f"{self.bucket}:{self.key}"


def check_digest(content: bytes, expected: str) -> None:
    algorithm = _DIGESTS.get(len(expected))
    if algorithm is None:
        raise DigestMismatch(f"unsupported digest length {len(expected)}")
    actual = hashlib.new(algorithm, content).hexdigest()
    if actual.lower() != expected.lower():
        raise DigestMismatch(f"script {algorithm} is {actual}, expected {expected}")


def resolve_script(spec: BridgeJobSpec, store_client: Optional[S3Client]) -> Script:
    if spec.scriptlocation is ScriptLocation.REMOTE:
        return RemotePath(spec.jobscript)
    if spec.scriptlocation is ScriptLocation.INLINE:
        if spec.scriptmd:
            check_digest(spec.jobscript.encode(), spec.scriptmd)
        return ScriptBody(spec.jobscript)
    if store_client is None:
        raise StagingError("scriptlocation s3 needs object storage")
    ref = ObjectRef.parse(spec.jobscript)
    content = store_client.get_object(ref.bucket, ref.key)
    if spec.scriptmd:
        check_digest(content, spec.scriptmd)
    return ScriptBody(content.decode())


def prepend_params(script: str, params: Mapping[str, str]) -> str:
    """Insert ``export`` lines for ``params`` right after any shebang."""
    if not params:
        return script
    exports = "".join(f"export {k}={shlex.quote(v)}\n" for k, v in sorted(params.items()))
    if script.startswith("#!"):
        first, _, rest = script.partition("\n")
        return f"{first}\n{exports}{rest}"
    return exports + script


def stage_inputs(spec: BridgeJobSpec, store_client: Optional[S3Client], adapter: ResourceAdapter,
                 session: Session) -> list[str]:
    """Copy every ``additionaldata`` object to the job's working directory on the resource."""
    if not spec.additionaldata:
        return []
    if store_client is None:
        raise StagingError("additionaldata needs object storage")
    workdir = spec.jobproperties.get("currentWorkingDir", "")
    delivered = []
    for text in spec.additionaldata:
        ref = ObjectRef.parse(text)
        content = store_client.get_object(ref.bucket, ref.key)
        target = posixpath.join(workdir, posixpath.basename(ref.key))
        delivered.append(adapter.upload_file(session, target, content))
        log.info("staged %s to %s", ref, target)
    return delivered


def upload_outputs(store_client: S3Client, bucket: str, files: Iterable[tuple[str, bytes]]) -> list[str]:
    files = list(files)
    if not files:
        return []
    store_client.make_bucket(bucket)
    keys = []
    for name, content in files:
        key = name.lstrip("/")
        store_client.put_object(bucket, key, content)
        keys.append(key)
    return keys


def storage_client_for(spec: BridgeJobSpec, credentials_dir, clock=None) -> Optional[S3Client]:
    """Object-storage client for the job, or None if the job declares no storage."""
    if not spec.s3endpoint:
        return None
    if spec.s3secret:
        creds = load_s3_credentials(credentials_dir, spec.s3secret)
        access, secret = creds.username, creds.token
    else:
        access, secret = "", ""
    return S3Client(spec.s3endpoint, access, secret, secure=spec.s3secure, clock=clock)
