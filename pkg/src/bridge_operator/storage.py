"""Minimal S3-compatible object storage client.

Path-style requests (``/<bucket>/<key>``) signed with AWS Signature
Version 4. Only what staging needs: create bucket, put object, get object.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
from datetime import datetime, timezone
from typing import Optional
from urllib.parse import quote

import httpx

from .clock import WallClock
from .errors import ObjectMissing, StagingError, StorageUnreachable

log = logging.getLogger(__name__)

EMPTY_SHA256 = hashlib.sha256(b"").hexdigest()


def _hmac(key: bytes, msg: str) -> bytes:
    return hmac.new(key, msg.encode(), hashlib.sha256).digest()


def signing_key(secret_key: str, date: str, region: str, service: str) -> bytes:
    k = _hmac(("AWS4" + secret_key).encode(), date)
    k = _hmac(k, region)
    k = _hmac(k, service)
    return _hmac(k, "aws4_request")


def _canonical_query(params: dict[str, str]) -> str:
    pairs = sorted((quote(k, safe="-_.~"), quote(v, safe="-_.~")) for k, v in params.items())
    return "&".join(f"{k}={v}" for k, v in pairs)


def sign_v4(
    method: str,
    path: str,
    query: dict[str, str],
    headers: dict[str, str],
    payload_sha256: str,
    access_key: str,
    secret_key: str,
    region: str,
    amz_date: str,
    service: str = "s3",
) -> str:
    """Authorization header value for a request.

    ``path`` must already be URI-encoded; ``headers`` are the ones to sign
    (they must include ``host`` and ``x-amz-date``).
    """
    canon_headers = {k.lower().strip(): " ".join(str(v).split()) for k, v in headers.items()}
    signed = ";".join(sorted(canon_headers))
    canonical_request = "\n".join([
        method,
        path,
        _canonical_query(query),
        "".join(f"{k}:{canon_headers[k]}\n" for k in sorted(canon_headers)),
        signed,
        payload_sha256,
    ])
    date = amz_date[:8]
    scope = f"{date}/{region}/{service}/aws4_request"
    string_to_sign = "\n".join([
        "AWS4-HMAC-SHA256",
        amz_date,
        scope,
        hashlib.sha256(canonical_request.encode()).hexdigest(),
    ])
    signature = hmac.new(signing_key(secret_key, date, region, service), string_to_sign.encode(),
                         hashlib.sha256).hexdigest()
    return f"AWS4-HMAC-SHA256 Credential={access_key}/{scope}, SignedHeaders={signed}, Signature={signature}"


def endpoint_url(endpoint: str, secure: bool) -> str:
    if "://" in endpoint:
        return endpoint.rstrip("/")
    return f"{'https' if secure else 'http'}://{endpoint.rstrip('/')}"


class S3Client:
    def __init__(
        self,
        endpoint: str,
        access_key: str,
        secret_key: str,
        secure: bool = False,
        region: str = "us-east-1",
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        clock=None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.base_url = endpoint_url(endpoint, secure)
        self.access_key = access_key
        self._secret_key = secret_key
        self.region = region
        self.retries = retries
        self.backoff = backoff
        self.clock = clock or WallClock()
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def __repr__(self) -> str:
        return f"S3Client({self.base_url!r}, access_key={self.access_key!r})"

    def close(self) -> None:
        self._client.close()

    def _signed_headers(self, method: str, path: str, body: bytes, query: dict[str, str]) -> dict[str, str]:
        amz_date = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        payload_hash = hashlib.sha256(body).hexdigest() if body else EMPTY_SHA256
        host = httpx.URL(self.base_url).netloc.decode()
        headers = {"host": host, "x-amz-content-sha256": payload_hash, "x-amz-date": amz_date}
        headers["authorization"] = sign_v4(method, path, query, headers, payload_hash,
                                           self.access_key, self._secret_key, self.region, amz_date)
        del headers["host"]
        return headers

    def _send(self, method: str, bucket: str, key: str = "", body: bytes = b"",
              query: Optional[dict[str, str]] = None) -> httpx.Response:
        query = query or {}
        path = "/" + quote(bucket, safe="")
        if key:
            path += "/" + quote(key, safe="/-_.~")
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.clock.sleep(self.backoff * 2 ** (attempt - 1))
            headers = self._signed_headers(method, path, body, query)
            try:
                response = self._client.request(method, path, params=query or None, headers=headers,
                                                content=body if body else None)
            except httpx.TransportError as exc:
                last = exc.__class__.__name__
                log.info("storage %s %s attempt %d failed: %s", method, path, attempt + 1, last)
                continue
            if response.status_code >= 500:
                last = f"HTTP {response.status_code}"
                continue
            return response
        raise StorageUnreachable(f"{method} {path}: gave up after {self.retries + 1} attempts ({last})")

    def make_bucket(self, bucket: str) -> bool:
        response = self._send("PUT", bucket)
        if response.status_code == 200:
            return True
        if response.status_code == 409:
            return False
        raise StagingError(f"create bucket {bucket}: HTTP {response.status_code}")

    def put_object(self, bucket: str, key: str, data: bytes) -> None:
        response = self._send("PUT", bucket, key, body=bytes(data))
        if response.status_code == 404:
            raise ObjectMissing(f"bucket {bucket} does not exist")
        if response.status_code != 200:
            raise StagingError(f"put {bucket}:{key}: HTTP {response.status_code}")

    def get_object(self, bucket: str, key: str) -> bytes:
        response = self._send("GET", bucket, key)
        if response.status_code == 404:
            raise ObjectMissing(f"{bucket}:{key} does not exist")
        if response.status_code != 200:
            raise StagingError(f"get {bucket}:{key}: HTTP {response.status_code}")
        return response.content
