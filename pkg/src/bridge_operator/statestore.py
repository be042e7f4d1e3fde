"""Durable, versioned, watchable job records.

One JSON file per job under ``<root>/<namespace>/<name>.record``, replaced
atomically on each write. Writers use compare-and-swap on the record
version; a per-key lock (thread lock plus lock file) makes the CAS safe
across threads and processes.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import tempfile
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Optional

from filelock import FileLock

from .errors import AlreadyExists, NotFound, StoreClosed, StoreError, VersionConflict
from .jobspec import BridgeState

log = logging.getLogger(__name__)

Key = tuple[str, str]
SUFFIX = ".record"


class EventKind(str, Enum):
    CREATED = "Created"
    UPDATED = "Updated"
    DELETED = "Deleted"


@dataclass(frozen=True)
class JobRecord:
    key: Key
    data: dict[str, str]
    version: int

    @property
    def status(self) -> BridgeState:
        return BridgeState(self.data.get("jobStatus", BridgeState.NEW.value))


@dataclass(frozen=True)
class WatchEvent:
    kind: EventKind
    record: JobRecord


_CLOSED = object()


class Watch:
    """A stream of committed mutations for keys under a prefix."""

    def __init__(self, store: "FileStore", prefix: str):
        self._store = store
        self.prefix = prefix
        self._queue: "queue.Queue[object]" = queue.Queue()
        self._closed = False

    def matches(self, key: Key) -> bool:
        return f"{key[0]}/{key[1]}".startswith(self.prefix)

    def _deliver(self, item: object) -> None:
        self._queue.put(item)

    def get(self, timeout: Optional[float] = None) -> Optional[WatchEvent]:
        """Next event, or None if nothing arrives within ``timeout``."""
        if self._closed:
            raise StoreClosed("watch closed")
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _CLOSED:
            self._closed = True
            raise StoreClosed("store shut down")
        return item  # type: ignore[return-value]

    def __iter__(self) -> Iterator[WatchEvent]:
        while True:
            yield self.get()  # type: ignore[misc]

    def close(self) -> None:
        self._store._unsubscribe(self)
        self._closed = True


class FileStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._guard = threading.Lock()
        self._key_locks: dict[Key, threading.Lock] = {}
        self._watchers: list[Watch] = []
        self._known: dict[Key, int] = {}
        self._closed = False

    # -- paths and locking -------------------------------------------------

    def path_for(self, key: Key) -> Path:
        return self.root / key[0] / f"{key[1]}{SUFFIX}"

    def _lock(self, key: Key):
        with self._guard:
            lock = self._key_locks.setdefault(key, threading.Lock())
        path = self.path_for(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreError(f"cannot prepare {path.parent}: {exc}") from exc
        # Lock files are never removed: unlinking one another process holds breaks exclusion.
        return _KeyLock(lock, FileLock(str(path) + ".lock"))

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosed("store is closed")

    # -- disk I/O ------------------------------------------------------------

    def _read(self, key: Key) -> Optional[JobRecord]:
        path = self.path_for(key)
        try:
            raw = path.read_text()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StoreError(f"cannot read {path}: {exc}") from exc
        try:
            doc = json.loads(raw)
            return JobRecord(key=key, data=dict(doc["data"]), version=int(doc["version"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreError(f"corrupt record {path}") from exc

    def _write(self, record: JobRecord) -> None:
        path = self.path_for(record.key)
        body = json.dumps({"version": record.version, "data": record.data}, indent=1, sort_keys=True)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "w") as fh:
                    fh.write(body)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            dir_fd = os.open(path.parent, os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc

    # -- public operations ---------------------------------------------------

    def create_record(self, key: Key, data: Mapping[str, str]) -> JobRecord:
        self._check_open()
        data = _validated(dict(data))
        with self._lock(key):
            if self._read(key) is not None:
                raise AlreadyExists(f"{key[0]}/{key[1]} already exists")
            record = JobRecord(key=key, data=data, version=1)
            self._write(record)
            self._commit(EventKind.CREATED, record)
        return record

    def update_record(self, key: Key, data: Mapping[str, str], expected_version: int) -> JobRecord:
        """Merge ``data`` into the record if its version is still ``expected_version``."""
        self._check_open()
        with self._lock(key):
            current = self._read(key)
            if current is None:
                raise NotFound(f"{key[0]}/{key[1]} not found")
            if current.version != expected_version:
                raise VersionConflict(key, expected_version, current.version)
            old_id = current.data.get("id", "")
            if old_id and "id" in data and data["id"] != old_id:
                raise StoreError(f"{key[0]}/{key[1]}: remote id is immutable once set")
            merged = _validated({**current.data, **data})
            record = JobRecord(key=key, data=merged, version=current.version + 1)
            self._write(record)
            self._commit(EventKind.UPDATED, record)
        return record

    def get_record(self, key: Key) -> JobRecord:
        self._check_open()
        record = self._read(key)
        if record is None:
            raise NotFound(f"{key[0]}/{key[1]} not found")
        return record

    def delete_record(self, key: Key) -> None:
        self._check_open()
        with self._lock(key):
            record = self._read(key)
            if record is None:
                return
            try:
                self.path_for(key).unlink()
            except FileNotFoundError:
                return
            except OSError as exc:
                raise StoreError(f"cannot delete {key[0]}/{key[1]}: {exc}") from exc
            self._commit(EventKind.DELETED, record)

    def modify(self, key: Key, fn, attempts: int = 20) -> JobRecord:
        """Read-modify-write with CAS retries; ``fn(record) -> dict | None``."""
        for _ in range(attempts):
            current = self.get_record(key)
            changes = fn(current)
            if not changes:
                return current
            try:
                return self.update_record(key, changes, current.version)
            except VersionConflict:
                continue
        raise StoreError(f"{key[0]}/{key[1]}: too much write contention")

    def keys(self) -> list[Key]:
        self._check_open()
        out = []
        for path in sorted(self.root.glob(f"*/*{SUFFIX}")):
            out.append((path.parent.name, path.name[: -len(SUFFIX)]))
        return out

    # -- watch ------------------------------------------------------------------

    def watch(self, key_prefix: str = "") -> Watch:
        self._check_open()
        w = Watch(self, key_prefix)
        with self._guard:
            self._watchers.append(w)
        return w

    def watcher_count(self) -> int:
        with self._guard:
            return len(self._watchers)

    def _unsubscribe(self, w: Watch) -> None:
        with self._guard:
            if w in self._watchers:
                self._watchers.remove(w)

    def _commit(self, kind: EventKind, record: JobRecord) -> None:
        # Called with the key lock held, so per-key delivery order is commit order.
        with self._guard:
            if kind is EventKind.DELETED:
                self._known.pop(record.key, None)
            else:
                self._known[record.key] = record.version
            watchers = [w for w in self._watchers if w.matches(record.key)]
        event = WatchEvent(kind, record)
        for w in watchers:
            w._deliver(event)

    def refresh(self) -> int:
        """Publish changes made by other processes sharing this root.

        Intermediate versions written elsewhere between two refreshes are
        not visible; only the latest one is delivered.
        """
        self._check_open()
        published = 0
        on_disk = set(self.keys())
        with self._guard:
            known = dict(self._known)
        for key in on_disk | set(known):
            with self._lock(key):
                record = self._read(key)
                with self._guard:
                    seen = self._known.get(key)
                if record is None and seen is not None:
                    self._commit(EventKind.DELETED, JobRecord(key, {}, seen))
                elif record is not None and seen is None:
                    self._commit(EventKind.CREATED if record.version == 1 else EventKind.UPDATED, record)
                elif record is not None and record.version > seen:
                    self._commit(EventKind.UPDATED, record)
                else:
                    continue
                published += 1
        return published

    def close(self) -> None:
        with self._guard:
            self._closed = True
            watchers, self._watchers = self._watchers, []
        for w in watchers:
            w._deliver(_CLOSED)


class _KeyLock:
    def __init__(self, thread_lock: threading.Lock, file_lock: FileLock):
        self._thread_lock = thread_lock
        self._file_lock = file_lock

    def __enter__(self):
        self._thread_lock.acquire()
        try:
            self._file_lock.acquire()
        except BaseException:
            self._thread_lock.release()
            raise
        return self

    def __exit__(self, *exc):
        try:
            self._file_lock.release()
        finally:
            self._thread_lock.release()


def _validated(data: dict) -> dict[str, str]:
    for k, v in data.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise StoreError(f"record fields must be strings: {k!r}")
    status = data.get("jobStatus")
    if status is not None:
        try:
            BridgeState(status)
        except ValueError:
            raise StoreError(f"jobStatus {status!r} is not a lifecycle state") from None
    return data
