"""The operator: one event loop that owns every per-job decision.

Three sources feed the loop: spec events (API calls and the spool
directory), store watch events, and worker exits. Each job gets a record
first and a worker second; a worker that exits while its job is not
terminal is restarted with exponential backoff.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .clock import WallClock
from .errors import AlreadyExists, InvalidState, NotFound, SchemaError, StoreClosed
from .jobspec import BridgeJobSpec, BridgeState, parse_spec
from .statestore import EventKind, FileStore, JobRecord, Key, WatchEvent

log = logging.getLogger(__name__)


class Liveness(str, Enum):
    STARTING = "Starting"
    RUNNING = "Running"
    EXITED = "Exited"
    CRASHED = "Crashed"


class Action(str, Enum):
    NONE = "None"
    RESTART = "Restart"


@dataclass
class WorkerHandle:
    key: Key
    liveness: Liveness = Liveness.STARTING
    restart_count: int = 0
    launch_env: dict[str, str] = field(default_factory=dict)
    exit_code: Optional[int] = None
    generation: int = 0
    runner: Any = field(default=None, repr=False)


@dataclass(frozen=True)
class JobStatus:
    state: BridgeState
    start_time: str
    end_time: str
    message: str
    remote_id: str = ""
    kill: bool = False


def initial_record(spec: BridgeJobSpec) -> dict[str, str]:
    data = spec.to_record_data()
    data.update(id="", jobStatus=BridgeState.NEW.value, message="", kill="false", startTime="", endTime="")
    return data


class Operator:
    def __init__(
        self,
        store: FileStore,
        launcher,
        clock=None,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        backoff_cap: float = 60.0,
        spool_dir=None,
        spool_interval: float = 0.5,
        refresh_interval: Optional[float] = None,
    ):
        self.store = store
        self.launcher = launcher
        self.clock = clock or WallClock()
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.backoff_cap = backoff_cap
        self.spool_dir = Path(spool_dir) if spool_dir else None
        self.spool_interval = spool_interval
        # Set when workers run in other processes: their writes reach the watch by polling.
        self.refresh_interval = refresh_interval
        self.workers: dict[Key, WorkerHandle] = {}
        self.restart_log: list[tuple[Key, float]] = []
        self._events: "queue.Queue[tuple]" = queue.Queue()
        self._stopping = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._direct = threading.RLock()
        self._threads: list[threading.Thread] = []
        self._watch = None
        self._spool_known: dict[Path, tuple[float, Optional[Key]]] = {}
        # Generations are global so a late exit from a deleted job's worker never matches a new handle.
        self._generations = itertools.count(1)

    # -- lifecycle -------------------------------------------------------------

    def start(self, resume: bool = True) -> "Operator":
        self._watch = self.store.watch("")
        self._thread = threading.Thread(target=self._loop, name="operator-loop", daemon=True)
        self._thread.start()
        self._spawn(self._pump_watch, "operator-watch")
        if self.spool_dir is not None:
            self.spool_dir.mkdir(parents=True, exist_ok=True)
            self._spawn(self._scan_spool_forever, "operator-spool")
        if resume:
            self._call(self._resume)
        return self

    def stop(self, stop_workers: bool = True) -> None:
        if stop_workers and self._thread is not None:
            for key in list(self.workers):
                self._call(self._stop_worker, key)
        self._stopping.set()
        if self._watch is not None:
            self._watch.close()
        if self._thread is not None:
            self._thread.join(10)
        for t in self._threads:
            t.join(5)

    def _spawn(self, target: Callable[[], None], name: str) -> None:
        t = threading.Thread(target=target, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def _call(self, fn: Callable, *args):
        """Run ``fn`` on the loop thread (or inline when no loop is running)."""
        if self._thread is None or threading.current_thread() is self._thread:
            with self._direct:
                return fn(*args)
        if self._stopping.is_set():
            raise RuntimeError("operator is stopped")
        fut: Future = Future()
        self._events.put(("call", fn, args, fut))
        return fut.result()

    def _loop(self) -> None:
        while not self._stopping.is_set():
            timeout = self.refresh_interval or 0.2
            try:
                event = self._events.get(timeout=timeout)
            except queue.Empty:
                if self.refresh_interval:
                    self._safe(self.store.refresh)
                continue
            kind = event[0]
            if kind == "call":
                _, fn, args, fut = event
                try:
                    fut.set_result(fn(*args))
                except BaseException as exc:
                    fut.set_exception(exc)
            elif kind == "exit":
                self._safe(self._on_exit, *event[1:])
            elif kind == "restart":
                self._safe(self._on_restart_due, *event[1:])
            elif kind == "store":
                self._safe(self._on_store_event, event[1])
        while True:
            try:
                event = self._events.get_nowait()
            except queue.Empty:
                break
            if event[0] == "call":
                event[3].set_exception(RuntimeError("operator is stopped"))

    @staticmethod
    def _safe(fn, *args) -> None:
        try:
            fn(*args)
        except Exception:
            log.exception("operator event handler failed")

    def _pump_watch(self) -> None:
        while not self._stopping.is_set():
            try:
                event = self._watch.get(timeout=0.2)
            except StoreClosed:
                return
            if event is not None:
                self._events.put(("store", event))

    # -- public verbs ------------------------------------------------------------

    def reconcile_created(self, spec: BridgeJobSpec) -> WorkerHandle:
        return self._call(self._created, spec)

    def reconcile_worker_exit(self, handle: WorkerHandle, code: int) -> Action:
        return self._call(self._decide_exit, handle, code)

    def signal_kill(self, key: Key) -> None:
        return self._call(self._kill, key)

    def reconcile_deleted(self, key: Key) -> None:
        return self._call(self._deleted, key)

    def job_status(self, key: Key) -> JobStatus:
        record = self.store.get_record(key)
        return status_of(record)

    def handle(self, key: Key) -> Optional[WorkerHandle]:
        return self.workers.get(key)

    # -- handlers (loop thread) ------------------------------------------------

    def _created(self, spec: BridgeJobSpec) -> WorkerHandle:
        key = spec.key
        existing = self.workers.get(key)
        if existing is not None and existing.liveness in (Liveness.STARTING, Liveness.RUNNING):
            raise AlreadyExists(f"{key[0]}/{key[1]} already has a worker")
        self.store.create_record(key, initial_record(spec))
        handle = WorkerHandle(key=key, launch_env={"NAMESPACE": key[0], "JOBNAME": key[1]})
        self.workers[key] = handle
        self._launch(handle)
        log.info("%s/%s: record created, worker launched", *key)
        return handle

    def _launch(self, handle: WorkerHandle) -> None:
        handle.liveness = Liveness.STARTING
        handle.exit_code = None
        handle.generation = generation = next(self._generations)
        key = handle.key

        def on_exit(code: int) -> None:
            self._events.put(("exit", key, generation, code))

        handle.runner = self.launcher.launch(key, dict(handle.launch_env), on_exit)
        handle.liveness = Liveness.RUNNING

    def _decide_exit(self, handle: WorkerHandle, code: int) -> Action:
        handle.exit_code = code
        try:
            record = self.store.get_record(handle.key)
        except NotFound:
            handle.liveness = Liveness.EXITED
            return Action.NONE
        # Terminality comes from the record: an exit code can be lost in a crash.
        if record.status.terminal:
            handle.liveness = Liveness.EXITED
            return Action.NONE
        handle.liveness = Liveness.CRASHED
        return Action.RESTART

    def backoff_delay(self, restart_count: int) -> float:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor ** restart_count)

    def _on_exit(self, key: Key, generation: int, code: int) -> None:
        handle = self.workers.get(key)
        if handle is None or handle.generation != generation:
            return
        action = self._decide_exit(handle, code)
        if action is Action.NONE:
            log.info("%s/%s: worker exited with %s", key[0], key[1], code)
            return
        delay = self.backoff_delay(handle.restart_count)
        log.warning("%s/%s: worker exited with %s before the job finished; restarting in %.1fs",
                    key[0], key[1], code, delay)

        def due():
            self.clock.sleep(delay, interrupt=self._stopping)
            if not self._stopping.is_set():
                self._events.put(("restart", key, generation))

        threading.Thread(target=due, name=f"backoff-{key[0]}-{key[1]}", daemon=True).start()

    def _on_restart_due(self, key: Key, generation: int) -> None:
        handle = self.workers.get(key)
        if handle is None or handle.generation != generation or handle.liveness is not Liveness.CRASHED:
            return
        try:
            record = self.store.get_record(key)
        except NotFound:
            self.workers.pop(key, None)
            return
        if record.status.terminal:
            handle.liveness = Liveness.EXITED
            return
        handle.restart_count += 1
        self.restart_log.append((key, self.clock.now()))
        self._launch(handle)

    def _kill(self, key: Key) -> None:
        def flag(record: JobRecord):
            if record.status.terminal:
                raise InvalidState(f"{key[0]}/{key[1]} already finished as {record.status.value}")
            return {"kill": "true"}

        self.store.modify(key, flag)
        log.info("%s/%s: kill flag set", *key)

    def _stop_worker(self, key: Key) -> None:
        handle = self.workers.pop(key, None)
        if handle is None:
            return
        if handle.runner is not None and handle.liveness in (Liveness.STARTING, Liveness.RUNNING):
            handle.runner.stop()
        handle.liveness = Liveness.EXITED

    def _deleted(self, key: Key) -> None:
        self._stop_worker(key)
        self.store.delete_record(key)
        log.info("%s/%s: deleted", *key)

    def _on_store_event(self, event: WatchEvent) -> None:
        key = event.record.key
        if event.kind is EventKind.DELETED:
            if key in self.workers:
                log.info("%s/%s: record removed, stopping its worker", *key)
                self._stop_worker(key)
        elif event.record.status.terminal and event.record.data:
            log.info("%s/%s: job is %s", key[0], key[1], event.record.status.value)

    def _resume(self) -> None:
        for key in self.store.keys():
            if key in self.workers:
                continue
            try:
                record = self.store.get_record(key)
            except NotFound:
                continue
            if record.status.terminal:
                continue
            handle = WorkerHandle(key=key, launch_env={"NAMESPACE": key[0], "JOBNAME": key[1]})
            self.workers[key] = handle
            self._launch(handle)
            log.info("%s/%s: resumed unfinished job", *key)

    # -- spool directory -----------------------------------------------------------

    def _scan_spool_forever(self) -> None:
        while not self._stopping.is_set():
            self._safe(self.scan_spool)
            self._stopping.wait(self.spool_interval)

    def scan_spool(self) -> None:
        """Create jobs for new spec files and delete jobs whose file is gone."""
        present = {p for p in self.spool_dir.iterdir() if p.suffix in (".yaml", ".yml", ".json") and p.is_file()}
        for path in sorted(present):
            mtime = path.stat().st_mtime
            known = self._spool_known.get(path)
            if known is not None and known[0] == mtime:
                continue
            key = None
            try:
                spec = parse_spec(path.read_text())
                key = spec.key
                self.reconcile_created(spec)
            except SchemaError as exc:
                log.error("spool file %s rejected: %s", path.name, exc)
            except AlreadyExists:
                pass
            self._spool_known[path] = (mtime, key)
        for path in set(self._spool_known) - present:
            _, key = self._spool_known.pop(path)
            if key is not None:
                self.reconcile_deleted(key)


def status_of(record: JobRecord) -> JobStatus:
    d = record.data
    return JobStatus(
        state=record.status,
        start_time=d.get("startTime", ""),
        end_time=d.get("endTime", ""),
        message=d.get("message", ""),
        remote_id=d.get("id", ""),
        kill=d.get("kill") == "true",
    )
