"""BridgeJob documents and the job lifecycle vocabulary.

A BridgeJob is a YAML (or JSON) document shaped like a Kubernetes custom
resource::

    kind: BridgeJob
    apiVersion: bridgeoperator.ibm.com/v1alpha1
    metadata:
      name: slurmjob-test
    spec:
      resourceURL: http://my-slurm-cluster@hpc.com
      image: slurmpod:0.1
      resourcesecret: mysecret
      ...

:func:`parse_spec` turns one into an immutable :class:`BridgeJobSpec`,
reporting every invalid field at once.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional
from urllib.parse import urlparse

import yaml

from .errors import SchemaError

KIND = "BridgeJob"
API_VERSION = "bridgeoperator.ibm.com/v1alpha1"
DEFAULT_NAMESPACE = "default"
DEFAULT_UPDATE_INTERVAL = 20
DEFAULT_PULL_POLICY = "IfNotPresent"

NAME_RE = re.compile(r"^[a-z0-9]([-a-z0-9]*[a-z0-9])?$")
HEX_RE = re.compile(r"^[0-9a-fA-F]+$")


class BridgeState(str, Enum):
    NEW = "NEW"
    SUBMITTED = "SUBMITTED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    KILLED = "KILLED"
    FAILED = "FAILED"
    UNKNOWN = "UNKNOWN"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES

    def __str__(self) -> str:
        return self.value


TERMINAL_STATES = frozenset({BridgeState.DONE, BridgeState.KILLED, BridgeState.FAILED})

_S = BridgeState
LEGAL_TRANSITIONS: dict[BridgeState, frozenset[BridgeState]] = {
    _S.NEW: frozenset({_S.SUBMITTED, _S.FAILED}),
    _S.SUBMITTED: frozenset({_S.RUNNING, _S.DONE, _S.KILLED, _S.FAILED, _S.UNKNOWN}),
    _S.RUNNING: frozenset({_S.DONE, _S.KILLED, _S.FAILED, _S.UNKNOWN}),
    _S.UNKNOWN: frozenset({_S.RUNNING, _S.DONE, _S.KILLED, _S.FAILED}),
    _S.DONE: frozenset(),
    _S.KILLED: frozenset(),
    _S.FAILED: frozenset(),
}


def validate_transition(src: BridgeState, dst: BridgeState) -> bool:
    return BridgeState(dst) in LEGAL_TRANSITIONS[BridgeState(src)]


class AdapterKind(str, Enum):
    SLURM = "slurm"
    LSF = "lsf"

    def __str__(self) -> str:
        return self.value


class ScriptLocation(str, Enum):
    REMOTE = "remote"
    S3 = "s3"
    INLINE = "inline"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class BridgeJobSpec:
    name: str
    namespace: str
    resource_url: str
    adapter_kind: AdapterKind
    resource_secret: str
    jobscript: str
    scriptlocation: ScriptLocation
    image_pull_policy: str = DEFAULT_PULL_POLICY
    update_interval: int = DEFAULT_UPDATE_INTERVAL
    scriptmd: Optional[str] = None
    scriptextraloc: Optional[str] = None
    additionaldata: tuple[str, ...] = ()
    jobproperties: dict[str, str] = field(default_factory=dict)
    jobparams: dict[str, str] = field(default_factory=dict)
    s3secret: Optional[str] = None
    s3endpoint: Optional[str] = None
    s3secure: bool = False
    upload_bucket: Optional[str] = None
    upload_files: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str]:
        return (self.namespace, self.name)

    def to_record_data(self) -> dict[str, str]:
        """Execution parameters as the flat string map kept in the job record."""
        return {
            "resourceURL": self.resource_url,
            "adapterKind": self.adapter_kind.value,
            "resourceSecret": self.resource_secret,
            "imagePullPolicy": self.image_pull_policy,
            "updateInterval": str(self.update_interval),
            "jobScript": self.jobscript,
            "scriptLocation": self.scriptlocation.value,
            "scriptMD": self.scriptmd or "",
            "scriptExtraLoc": self.scriptextraloc or "",
            "additionalData": json.dumps(list(self.additionaldata)),
            "jobProperties": json.dumps(self.jobproperties, sort_keys=True),
            "jobParams": json.dumps(self.jobparams, sort_keys=True),
            "s3Secret": self.s3secret or "",
            "s3Endpoint": self.s3endpoint or "",
            "s3Secure": "true" if self.s3secure else "false",
            "s3UploadBucket": self.upload_bucket or "",
            "s3UploadFiles": json.dumps(list(self.upload_files)),
        }

    @classmethod
    def from_record_data(cls, key: tuple[str, str], data: Mapping[str, str]) -> "BridgeJobSpec":
        return cls(
            name=key[1],
            namespace=key[0],
            resource_url=data["resourceURL"],
            adapter_kind=AdapterKind(data["adapterKind"]),
            resource_secret=data["resourceSecret"],
            jobscript=data["jobScript"],
            scriptlocation=ScriptLocation(data["scriptLocation"]),
            image_pull_policy=data.get("imagePullPolicy", DEFAULT_PULL_POLICY),
            update_interval=int(data.get("updateInterval", DEFAULT_UPDATE_INTERVAL)),
            scriptmd=data.get("scriptMD") or None,
            scriptextraloc=data.get("scriptExtraLoc") or None,
            additionaldata=tuple(json.loads(data.get("additionalData") or "[]")),
            jobproperties=json.loads(data.get("jobProperties") or "{}"),
            jobparams=json.loads(data.get("jobParams") or "{}"),
            s3secret=data.get("s3Secret") or None,
            s3endpoint=data.get("s3Endpoint") or None,
            s3secure=data.get("s3Secure") == "true",
            upload_bucket=data.get("s3UploadBucket") or None,
            upload_files=tuple(json.loads(data.get("s3UploadFiles") or "[]")),
        )


def client_job_name(namespace: str, name: str, nonce: str) -> str:
    """Name under which the remote job is registered.

    ``nonce`` is fixed per record, so restarts of one run find their job
    while a re-created job with the same name never adopts an old one.
    """
    return f"bridge-{namespace}-{name}-{nonce}"


def is_object_ref(value: str) -> bool:
    bucket, sep, key = value.partition(":")
    return bool(sep and bucket and key)


def parse_spec(document: str | bytes | Mapping[str, Any], namespace: Optional[str] = None) -> BridgeJobSpec:
    """Parse and validate a BridgeJob document.

    ``namespace`` is used when the document's metadata carries none.
    Raises :class:`SchemaError` listing every missing or invalid field.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise SchemaError([f"document: not valid YAML ({exc.__class__.__name__})"]) from None
    if not isinstance(document, Mapping):
        raise SchemaError(["document: expected a mapping at the top level"])

    errors: list[str] = []
    v = _Reader(errors)

    kind = v.required(document, "kind")
    if kind is not None and kind != KIND:
        errors.append(f"kind: expected {KIND!r}, got {kind!r}")
    api_version = v.required(document, "apiVersion")
    if api_version is not None and api_version != API_VERSION:
        errors.append(f"apiVersion: expected {API_VERSION!r}, got {api_version!r}")

    metadata = v.section(document, "metadata", required=True)
    name = v.required(metadata, "name", prefix="metadata.")
    ns = v.optional(metadata, "namespace", prefix="metadata.") or namespace or DEFAULT_NAMESPACE
    for label, value in (("metadata.name", name), ("metadata.namespace", ns)):
        if value is not None and not NAME_RE.match(str(value)):
            errors.append(f"{label}: {value!r} must match {NAME_RE.pattern}")

    spec = v.section(document, "spec", required=True)
    resource_url = v.required(spec, "resourceURL", prefix="spec.")
    if resource_url is not None:
        parsed = urlparse(str(resource_url))
        if parsed.scheme not in ("http", "https") or not parsed.hostname:
            errors.append(f"spec.resourceURL: {resource_url!r} is not an absolute http(s) URL")

    adapter_kind = _adapter_kind(spec, errors)
    resource_secret = v.required(spec, "resourcesecret", prefix="spec.")
    pull_policy = v.optional(spec, "imagepullpolicy", prefix="spec.") or DEFAULT_PULL_POLICY
    update_interval = _positive_int(spec.get("updateinterval"), "spec.updateinterval", errors)

    jobdata = v.section(spec, "jobdata", required=True, prefix="spec.")
    jobscript = v.required(jobdata, "jobscript", prefix="spec.jobdata.")
    location_raw = v.required(jobdata, "scriptlocation", prefix="spec.jobdata.")
    location = None
    if location_raw is not None:
        try:
            location = ScriptLocation(str(location_raw))
        except ValueError:
            errors.append(
                f"spec.jobdata.scriptlocation: {location_raw!r} is not one of remote, s3, inline"
            )
    scriptmd = v.optional(jobdata, "scriptmd", prefix="spec.jobdata.") or None
    if scriptmd is not None and not (HEX_RE.match(scriptmd) and len(scriptmd) in (32, 40, 64)):
        errors.append("spec.jobdata.scriptmd: expected an md5, sha1 or sha256 hex digest")
    scriptextraloc = v.optional(jobdata, "scriptextraloc", prefix="spec.jobdata.") or None
    additional = _string_list(jobdata.get("additionaldata"), "spec.jobdata.additionaldata", errors)
    for ref in additional:
        if not is_object_ref(ref):
            errors.append(f"spec.jobdata.additionaldata: {ref!r} is not a <bucket>:<key> reference")
    properties = _string_map(jobdata.get("jobproperties"), "spec.jobdata.jobproperties", errors)
    params = _string_map(jobdata.get("jobparams"), "spec.jobdata.jobparams", errors)

    s3storage = v.section(spec, "s3storage", prefix="spec.")
    s3secret = v.optional(s3storage, "s3secret", prefix="spec.s3storage.") or None
    endpoint = v.optional(s3storage, "endpoint", prefix="spec.s3storage.") or None
    secure = _boolean(s3storage.get("secure"), "spec.s3storage.secure", errors)

    s3upload = v.section(spec, "s3upload", prefix="spec.")
    bucket = v.optional(s3upload, "bucket", prefix="spec.s3upload.") or None
    files = _string_list(s3upload.get("files"), "spec.s3upload.files", errors)

    if location is ScriptLocation.S3:
        if jobscript is not None and not is_object_ref(str(jobscript)):
            errors.append("spec.jobdata.jobscript: scriptlocation s3 needs a <bucket>:<key> reference")
        if endpoint is None:
            errors.append("spec.s3storage.endpoint: required when scriptlocation is s3")
    if additional and endpoint is None:
        errors.append("spec.s3storage.endpoint: required when jobdata.additionaldata is set")
    if files:
        if bucket is None:
            errors.append("spec.s3upload.bucket: required when s3upload.files is set")
        if endpoint is None:
            errors.append("spec.s3storage.endpoint: required when s3upload.files is set")

    if errors:
        raise SchemaError(errors)
    return BridgeJobSpec(
        name=str(name),
        namespace=str(ns),
        resource_url=str(resource_url),
        adapter_kind=adapter_kind,
        resource_secret=str(resource_secret),
        jobscript=str(jobscript),
        scriptlocation=location,
        image_pull_policy=str(pull_policy),
        update_interval=update_interval,
        scriptmd=scriptmd,
        scriptextraloc=scriptextraloc,
        additionaldata=tuple(additional),
        jobproperties=properties,
        jobparams=params,
        s3secret=s3secret,
        s3endpoint=endpoint,
        s3secure=secure,
        upload_bucket=bucket,
        upload_files=tuple(files),
    )


def serialize_spec(spec: BridgeJobSpec) -> dict[str, Any]:
    """The document form of ``spec``; ``parse_spec(serialize_spec(s)) == s``."""
    jobdata: dict[str, Any] = {
        "jobscript": spec.jobscript,
        "scriptlocation": spec.scriptlocation.value,
        "jobproperties": dict(spec.jobproperties),
    }
    if spec.scriptmd:
        jobdata["scriptmd"] = spec.scriptmd
    if spec.scriptextraloc:
        jobdata["scriptextraloc"] = spec.scriptextraloc
    if spec.additionaldata:
        jobdata["additionaldata"] = list(spec.additionaldata)
    if spec.jobparams:
        jobdata["jobparams"] = dict(spec.jobparams)
    body: dict[str, Any] = {
        "resourceURL": spec.resource_url,
        "adapterkind": spec.adapter_kind.value,
        "resourcesecret": spec.resource_secret,
        "imagepullpolicy": spec.image_pull_policy,
        "updateinterval": spec.update_interval,
        "jobdata": jobdata,
        "s3storage": {"secure": spec.s3secure},
    }
    if spec.s3secret:
        body["s3storage"]["s3secret"] = spec.s3secret
    if spec.s3endpoint:
        body["s3storage"]["endpoint"] = spec.s3endpoint
    if spec.upload_bucket or spec.upload_files:
        upload: dict[str, Any] = {"files": list(spec.upload_files)}
        if spec.upload_bucket:
            upload["bucket"] = spec.upload_bucket
        body["s3upload"] = upload
    return {
        "kind": KIND,
        "apiVersion": API_VERSION,
        "metadata": {"name": spec.name, "namespace": spec.namespace},
        "spec": body,
    }


def dump_spec(spec: BridgeJobSpec) -> str:
    return yaml.safe_dump(serialize_spec(spec), sort_keys=False)


class _Reader:
    def __init__(self, errors: list[str]):
        self.errors = errors

    def section(self, parent: Mapping, key: str, required: bool = False, prefix: str = "") -> Mapping:
        value = parent.get(key)
        if value is None:
            if required:
                self.errors.append(f"{prefix}{key}: required")
            return {}
        if not isinstance(value, Mapping):
            self.errors.append(f"{prefix}{key}: expected a mapping")
            return {}
        return value

    def required(self, parent: Mapping, key: str, prefix: str = ""):
        value = parent.get(key)
        if value is None or (isinstance(value, str) and not value.strip()):
            self.errors.append(f"{prefix}{key}: required")
            return None
        if isinstance(value, (Mapping, list)):
            self.errors.append(f"{prefix}{key}: expected a scalar")
            return None
        return str(value) if not isinstance(value, str) else value

    def optional(self, parent: Mapping, key: str, prefix: str = "") -> Optional[str]:
        value = parent.get(key)
        if value is None or value == "":
            return None
        if isinstance(value, (Mapping, list)):
            self.errors.append(f"{prefix}{key}: expected a scalar")
            return None
        return str(value)


def _adapter_kind(spec: Mapping, errors: list[str]) -> Optional[AdapterKind]:
    explicit = spec.get("adapterkind")
    image = spec.get("image")
    if explicit in (None, "") and image in (None, ""):
        errors.append("spec.adapterkind: required (or the legacy spec.image)")
        return None
    if explicit not in (None, ""):
        try:
            kind = AdapterKind(str(explicit).lower())
        except ValueError:
            errors.append(f"spec.adapterkind: {explicit!r} is not one of slurm, lsf")
            return None
        if image not in (None, "") and _kind_from_image(str(image)) not in (None, kind):
            errors.append(f"spec.image: {image!r} contradicts adapterkind {kind.value!r}")
        return kind
    kind = _kind_from_image(str(image))
    if kind is None:
        errors.append(f"spec.image: cannot infer an adapter from {image!r} (expected 'slurm' or 'lsf')")
    return kind


def _kind_from_image(image: str) -> Optional[AdapterKind]:
    lowered = image.lower()
    matches = [k for k in AdapterKind if k.value in lowered]
    return matches[0] if len(matches) == 1 else None


def _positive_int(value: Any, label: str, errors: list[str]) -> int:
    if value is None or value == "":
        return DEFAULT_UPDATE_INTERVAL
    if isinstance(value, bool):
        errors.append(f"{label}: expected an integer")
        return DEFAULT_UPDATE_INTERVAL
    try:
        number = int(str(value).strip())
    except ValueError:
        errors.append(f"{label}: expected an integer, got {value!r}")
        return DEFAULT_UPDATE_INTERVAL
    if number < 1:
        errors.append(f"{label}: must be >= 1")
    return number


def _boolean(value: Any, label: str, errors: list[str]) -> bool:
    if value is None or value == "":
        return False
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "yes", "1"):
        return True
    if text in ("false", "no", "0"):
        return False
    errors.append(f"{label}: expected a boolean, got {value!r}")
    return False


def _scalar_text(value: Any) -> Optional[str]:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (str, int, float)):
        return str(value)
    return None


def _string_map(value: Any, label: str, errors: list[str]) -> dict[str, str]:
    # The sample document carries jobproperties as a JSON object inside a block string.
    if value is None or value == "":
        return {}
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            errors.append(f"{label}: string value is not a JSON object")
            return {}
    if not isinstance(value, Mapping):
        errors.append(f"{label}: expected a mapping of strings")
        return {}
    out: dict[str, str] = {}
    for k, item in value.items():
        text = _scalar_text(item)
        if text is None:
            errors.append(f"{label}.{k}: expected a scalar value")
        else:
            out[str(k)] = text
    return out


def _string_list(value: Any, label: str, errors: list[str]) -> list[str]:
    if value is None or value == "":
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if not isinstance(value, list):
        errors.append(f"{label}: expected a list")
        return []
    out = []
    for item in value:
        text = _scalar_text(item)
        if text is None or not text:
            errors.append(f"{label}: entries must be non-empty strings")
        else:
            out.append(text)
    return out
