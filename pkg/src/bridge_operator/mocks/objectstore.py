"""In-memory S3-compatible object store (bucket create, object put/get).

Authentication is a static check: the access key named in the SigV4
``Authorization`` header must be known, and the declared payload hash must
match the body. Signatures themselves are not recomputed.
"""

from __future__ import annotations

import hashlib
import re
import threading
from typing import Optional

from fastapi import FastAPI, Request, Response

from ..clock import WallClock
from .faults import FaultMiddleware, FaultPlan, FaultState

_CREDENTIAL_RE = re.compile(r"Credential=([^/,\s]+)/")


def _error(status: int, code: str, message: str, resource: str = "") -> Response:
    body = (f"<?xml version=\"1.0\" encoding=\"UTF-8\"?><Error><Code>{code}</Code>"
            f"<Message>{message}</Message><Resource>{resource}</Resource></Error>")
    return Response(body, status_code=status, media_type="application/xml")


class ObjectStoreMock:
    def __init__(self, access_keys: Optional[dict[str, str]] = None, clock=None,
                 faults: Optional[FaultPlan] = None):
        self.access_keys = dict(access_keys or {"bridge-access": "bridge-secret"})
        self.clock = clock or WallClock()
        self.faults = FaultState(self.clock, faults)
        self.buckets: dict[str, dict[str, bytes]] = {}
        self._lock = threading.Lock()

    def put(self, bucket: str, key: str, data: bytes) -> None:
        with self._lock:
            self.buckets.setdefault(bucket, {})[key] = bytes(data)

    def get(self, bucket: str, key: str) -> Optional[bytes]:
        with self._lock:
            return self.buckets.get(bucket, {}).get(key)

    def objects(self, bucket: str) -> dict[str, bytes]:
        with self._lock:
            return dict(self.buckets.get(bucket, {}))

    def check(self, request: Request, body: bytes) -> Optional[Response]:
        match = _CREDENTIAL_RE.search(request.headers.get("authorization", ""))
        if not match or match.group(1) not in self.access_keys:
            return _error(403, "InvalidAccessKeyId", "unknown access key")
        declared = request.headers.get("x-amz-content-sha256", "")
        if declared != "UNSIGNED-PAYLOAD" and declared != hashlib.sha256(body).hexdigest():
            return _error(400, "XAmzContentSHA256Mismatch", "payload hash mismatch")
        return None


def create_objectstore_app(store: ObjectStoreMock):
    app = FastAPI(title="mock object store")

    @app.post("/_mock/faults")
    def set_faults(plan: FaultPlan):
        store.faults.set_plan(plan)
        return plan

    @app.get("/_mock/requests")
    def requests_log():
        return store.faults.log_as_dicts()

    @app.get("/_mock/objects")
    def objects():
        with store._lock:
            return {b: sorted(objs) for b, objs in store.buckets.items()}

    @app.put("/{bucket}")
    async def make_bucket(bucket: str, request: Request):
        denied = store.check(request, await request.body())
        if denied:
            return denied
        with store._lock:
            if bucket in store.buckets:
                return _error(409, "BucketAlreadyOwnedByYou", "bucket exists", bucket)
            store.buckets[bucket] = {}
        return Response(status_code=200, headers={"Location": f"/{bucket}"})

    @app.put("/{bucket}/{key:path}")
    async def put_object(bucket: str, key: str, request: Request):
        body = await request.body()
        denied = store.check(request, body)
        if denied:
            return denied
        with store._lock:
            if bucket not in store.buckets:
                return _error(404, "NoSuchBucket", "bucket does not exist", bucket)
            store.buckets[bucket][key] = body
        return Response(status_code=200, headers={"ETag": f"\"{hashlib.md5(body).hexdigest()}\""})

    @app.get("/{bucket}/{key:path}")
    async def get_object(bucket: str, key: str, request: Request):
        denied = store.check(request, await request.body())
        if denied:
            return denied
        with store._lock:
            if bucket not in store.buckets:
                return _error(404, "NoSuchBucket", "bucket does not exist", bucket)
            data = store.buckets[bucket].get(key)
        if data is None:
            return _error(404, "NoSuchKey", "key does not exist", f"{bucket}/{key}")
        return Response(data, media_type="application/octet-stream",
                        headers={"ETag": f"\"{hashlib.md5(data).hexdigest()}\""})

    app.state.store = store
    return FaultMiddleware(app, store.faults)
