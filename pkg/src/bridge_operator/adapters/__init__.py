from __future__ import annotations

from ..jobspec import AdapterKind
from .base import (
    LSF_STATES,
    SLURM_STATES,
    RemoteJobInfo,
    RemotePath,
    ResourceAdapter,
    Script,
    ScriptBody,
    Session,
    load_manifest,
    map_remote_state,
    translate_properties,
)
from .credentials import CredentialSet, load_credentials, load_s3_credentials
from .lsf import LSFAdapter
from .slurm import SlurmAdapter

ADAPTERS: dict[AdapterKind, type[ResourceAdapter]] = {
    AdapterKind.SLURM: SlurmAdapter,
    AdapterKind.LSF: LSFAdapter,
}


def make_adapter(kind: AdapterKind | str, resource_url: str, **kwargs) -> ResourceAdapter:
    return ADAPTERS[AdapterKind(kind)](resource_url, **kwargs)


__all__ = [
    "ADAPTERS",
    "CredentialSet",
    "LSFAdapter",
    "LSF_STATES",
    "RemoteJobInfo",
    "RemotePath",
    "ResourceAdapter",
    "SLURM_STATES",
    "Script",
    "ScriptBody",
    "Session",
    "SlurmAdapter",
    "load_credentials",
    "load_manifest",
    "load_s3_credentials",
    "make_adapter",
    "map_remote_state",
    "translate_properties",
]
