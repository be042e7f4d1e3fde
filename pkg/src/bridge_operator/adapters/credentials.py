"""Credential files.

A credential set is a small ``key=value`` file named after the secret it
stands in for, e.g. ``/credentials/mysecret``::

    username=alice
    token=...

Object-storage sets use ``accessKey``/``secretKey`` instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import AuthError

DEFAULT_CREDENTIALS_DIR = "/credentials"
DEFAULT_S3_CREDENTIALS_DIR = "/s3credentials"


@dataclass(frozen=True)
class CredentialSet:
    username: str
    token: str = field(repr=False)
    extra: dict[str, str] = field(default_factory=dict, repr=False)

    def __repr__(self) -> str:
        return f"CredentialSet(username={self.username!r}, token=***)"

    __str__ = __repr__


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if sep:
            values[k.strip()] = v.strip()
    return values


def _load(directory: str | os.PathLike, name: str, user_key: str, secret_key: str) -> CredentialSet:
    path = Path(directory) / name
    try:
        values = read_key_values(path)
    except OSError:
        raise AuthError(f"credential set {name!r} is not readable in {directory}") from None
    if not values.get(user_key) or not values.get(secret_key):
        raise AuthError(f"credential set {name!r} needs both {user_key} and {secret_key}")
    extra = {k: v for k, v in values.items() if k not in (user_key, secret_key)}
    return CredentialSet(values[user_key], values[secret_key], extra)


def load_credentials(directory: str | os.PathLike, name: str) -> CredentialSet:
    return _load(directory, name, "username", "token")


def load_s3_credentials(directory: str | os.PathLike, name: str) -> CredentialSet:
    return _load(directory, name, "accessKey", "secretKey")


def write_credentials(directory: str | os.PathLike, name: str, **values: str) -> Path:
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    os.chmod(path, 0o600)
    return path
