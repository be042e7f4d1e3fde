"""Per-job controller: submit the remote job once, then monitor it to the end.

The worker keeps everything it needs in the job record. A restarted worker
that finds a remote id in the record resumes monitoring; one that finds a
client name but no id first asks the manager whether a job under that name
already exists and adopts it, so a crash between submission and recording
the id never produces a second remote job.

Run as ``python -m bridge_operator.worker`` with ``NAMESPACE`` and
``JOBNAME`` set, or in-process through :func:`run_worker`.
"""

from __future__ import annotations

import logging
import os
import secrets
import signal
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .adapters import make_adapter
from .adapters.base import RemoteJobInfo, ResourceAdapter, ScriptBody, Session
from .adapters.credentials import (
    DEFAULT_CREDENTIALS_DIR,
    DEFAULT_S3_CREDENTIALS_DIR,
    CredentialSet,
    load_credentials,
)
from .clock import WallClock, clock_from_env, rfc3339
from .errors import (
    AdapterError,
    BridgeError,
    FileMissing,
    NotFound,
    NotFoundRemote,
    StagingError,
    StoreError,
    SubmitRejected,
    Unreachable,
    Unsupported,
)
from .jobspec import BridgeJobSpec, BridgeState, client_job_name, validate_transition
from .staging import prepend_params, resolve_script, stage_inputs, storage_client_for, upload_outputs
from .statestore import FileStore, JobRecord, Key

log = logging.getLogger(__name__)

EXIT_DONE = 0
EXIT_FAILED = 1
EXIT_FATAL = 2
EXIT_STOPPED = 3
EXIT_CRASHED = 137

SUBMIT_FAILED_MESSAGE = "Failed to submit a job to HPC resource"
UNKNOWN_AFTER_FAILURES = 3

CRASH_POINTS = (
    "before_submit",
    "after_submit",
    "after_id_write",
    "mid_monitor",
    "after_terminal_mapping",
    "before_output_upload",
    "after_output_upload",
    "after_terminal_write",
)


class SimulatedCrash(BaseException):
    """Raised at an armed crash point when the worker runs in a thread."""


class WorkerStopped(Exception):
    """The job was deleted or the worker was told to stop."""


class CrashPlan:
    """Crash once at a named point; used to test restart behaviour.

    With ``marker`` set, "once" survives restarts of separate processes: the
    marker file is created just before crashing and disarms later runs.
    ``hard`` exits the process immediately instead of raising.
    """

    def __init__(self, point: Optional[str] = None, marker: Optional[str | os.PathLike] = None,
                 hard: bool = False):
        if point is not None and point not in CRASH_POINTS:
            raise ValueError(f"unknown crash point {point!r}")
        self.point = point
        self.marker = Path(marker) if marker else None
        self.hard = hard
        self.fired = False

    @classmethod
    def from_env(cls, environ=None) -> "CrashPlan":
        environ = os.environ if environ is None else environ
        return cls(environ.get("BRIDGE_CRASH_AT") or None, environ.get("BRIDGE_CRASH_MARKER") or None, hard=True)

    def hit(self, name: str) -> None:
        if name != self.point or self.fired:
            return
        if self.marker is not None:
            if self.marker.exists():
                return
            self.marker.parent.mkdir(parents=True, exist_ok=True)
            self.marker.touch()
        self.fired = True
        log.warning("simulated crash at %s", name)
        if self.hard:
            logging.shutdown()
            os._exit(EXIT_CRASHED)
        raise SimulatedCrash(name)


NO_CRASH = CrashPlan()


@dataclass
class WorkerContext:
    key: Key
    spec: BridgeJobSpec
    store: FileStore
    adapter: ResourceAdapter
    credentials: CredentialSet
    poll: float
    clock: object = field(default_factory=WallClock)
    storage: object = None
    downloads_dir: Path = Path("downloads")
    stop: threading.Event = field(default_factory=threading.Event)
    crash: CrashPlan = NO_CRASH

    def __post_init__(self):
        if self.poll < 1:
            raise ValueError("poll must be at least one second")
        if self.key != self.spec.key:
            raise ValueError("context key does not match its record")


def build_context(
    key: Key,
    store: FileStore,
    credentials_dir=DEFAULT_CREDENTIALS_DIR,
    s3_credentials_dir=DEFAULT_S3_CREDENTIALS_DIR,
    downloads_root="downloads",
    clock=None,
    stop: Optional[threading.Event] = None,
    crash: CrashPlan = NO_CRASH,
    adapter_factory: Optional[Callable[[BridgeJobSpec], ResourceAdapter]] = None,
) -> WorkerContext:
    """Assemble a context from the job record and credential files."""
    clock = clock or WallClock()
    record = store.get_record(key)
    spec = BridgeJobSpec.from_record_data(key, record.data)
    adapter = adapter_factory(spec) if adapter_factory else make_adapter(spec.adapter_kind, spec.resource_url)
    return WorkerContext(
        key=key,
        spec=spec,
        store=store,
        adapter=adapter,
        credentials=load_credentials(credentials_dir, spec.resource_secret),
        poll=spec.update_interval,
        clock=clock,
        storage=storage_client_for(spec, s3_credentials_dir, clock=clock),
        downloads_dir=Path(downloads_root) / key[0] / key[1],
        stop=stop or threading.Event(),
        crash=crash,
    )


def exit_code_for(state: BridgeState) -> int:
    return EXIT_DONE if state is BridgeState.DONE else EXIT_FAILED


class BridgeWorker:
    def __init__(self, ctx: WorkerContext):
        self.ctx = ctx
        self.session: Optional[Session] = None
        self.staging_message = ""
        self.written_states: list[BridgeState] = []

    @property
    def _label(self) -> str:
        return f"{self.ctx.key[0]}/{self.ctx.key[1]}"

    # -- record access -----------------------------------------------------

    def _get(self) -> JobRecord:
        try:
            return self.ctx.store.get_record(self.ctx.key)
        except NotFound:
            raise WorkerStopped("job record deleted") from None

    def _update(self, changes: dict[str, str], attempts: int = 2) -> Optional[JobRecord]:
        """CAS-merge ``changes``, dropping illegal status moves and no-op fields."""

        last: dict[str, str] = {}

        def compute(record: JobRecord):
            out = {}
            for k, v in changes.items():
                if record.data.get(k) == v:
                    continue
                if k == "jobStatus" and not validate_transition(record.status, BridgeState(v)):
                    continue
                if k == "startTime" and record.data.get("startTime"):
                    continue
                out[k] = v
            last.clear()
            last.update(out)
            return out

        try:
            record = self.ctx.store.modify(self.ctx.key, compute, attempts=attempts)
        except NotFound:
            raise WorkerStopped("job record deleted") from None
        except StoreError as exc:
            log.warning("%s: record update skipped this cycle: %s", self._label, exc)
            return None
        if "jobStatus" in last:
            self.written_states.append(BridgeState(last["jobStatus"]))
        return record

    # -- main flow ----------------------------------------------------------

    def run(self) -> int:
        try:
            return self._run()
        except WorkerStopped as exc:
            log.info("%s: worker stopping: %s", self._label, exc)
            return EXIT_STOPPED

    def _run(self) -> int:
        ctx = self.ctx
        try:
            record = ctx.store.get_record(ctx.key)
        except (NotFound, StoreError) as exc:
            log.error("%s: cannot read job record: %s", self._label, exc)
            return EXIT_FATAL
        if record.status.terminal:
            return exit_code_for(record.status)
        try:
            self.session = ctx.adapter.get_token(ctx.credentials)
        except AdapterError as exc:
            log.error("%s: cannot log into %s: %s", self._label, ctx.spec.resource_url, exc)
            return EXIT_FATAL

        job_id = record.data.get("id", "")
        if not job_id:
            log.info("%s: remote job does not exist, submitting", self._label)
            try:
                outcome = self._submit(record)
            except (Unreachable, AdapterError) as exc:
                # The manager may or may not have the job; a restart resolves it by name.
                log.error("%s: submission outcome unknown: %s", self._label, exc)
                return EXIT_FATAL
            if isinstance(outcome, int):
                return outcome
            job_id = outcome
        else:
            log.info("%s: remote job %s already recorded, resuming monitoring", self._label, job_id)
        final = self.monitor(job_id)
        return exit_code_for(final)

    def _fail(self, message: str) -> int:
        self._update({"jobStatus": BridgeState.FAILED.value, "message": message}, attempts=20)
        return EXIT_FAILED

    def _submit(self, record: JobRecord):
        ctx, spec = self.ctx, self.ctx.spec
        if record.data.get("kill") == "true":
            log.info("%s: kill requested before submission", self._label)
            return self._fail("Job was killed before submission")
        client_name = record.data.get("clientName", "")
        adopted = None
        if client_name:
            adopted = ctx.adapter.find_job(self.session, client_name)
        else:
            client_name = client_job_name(*ctx.key, secrets.token_hex(4))
            self._update({"clientName": client_name}, attempts=20)
        ctx.crash.hit("before_submit")

        if adopted:
            log.info("%s: adopting remote job %s submitted by an earlier attempt", self._label, adopted)
            job_id = adopted
        else:
            try:
                script = resolve_script(spec, ctx.storage)
                environment = dict(spec.jobparams)
                if isinstance(script, ScriptBody):
                    script = ScriptBody(prepend_params(script.text, spec.jobparams))
                    environment = {}
                stage_inputs(spec, ctx.storage, ctx.adapter, self.session)
            except (StagingError, Unsupported, FileMissing) as exc:
                log.error("%s: input staging failed: %s", self._label, exc)
                return self._fail(f"Failed to stage job inputs: {exc}")
            try:
                job_id = ctx.adapter.submit(self.session, script, spec.jobproperties, client_name, environment)
            except SubmitRejected as exc:
                log.error("%s: %s", self._label, exc)
                return self._fail(SUBMIT_FAILED_MESSAGE)
        ctx.crash.hit("after_submit")
        self._update({"id": job_id, "jobStatus": BridgeState.SUBMITTED.value, "message": ""}, attempts=20)
        ctx.crash.hit("after_id_write")
        return job_id

    # -- monitoring -------------------------------------------------------------

    def _fetch(self, job_id: str) -> Optional[RemoteJobInfo]:
        try:
            return self.ctx.adapter.get_job_info(self.session, job_id)
        except (AdapterError, NotFoundRemote) as exc:
            log.warning("%s: status query failed: %s", self._label, exc)
            return None

    def monitor(self, job_id: str) -> BridgeState:
        ctx = self.ctx
        failures = 0
        kill_sent = False
        polls_since_kill = 0
        while True:
            ctx.clock.sleep(ctx.poll, interrupt=ctx.stop)
            if ctx.stop.is_set():
                raise WorkerStopped("stop requested")
            record = self._get()
            info = self._fetch(job_id)
            failures = 0 if info is not None else failures + 1

            if record.data.get("kill") == "true" and not kill_sent:
                try:
                    ctx.adapter.kill(self.session, job_id)
                    kill_sent = True
                    log.info("%s: kill sent for remote job %s", self._label, job_id)
                except NotFoundRemote:
                    kill_sent = True
                except AdapterError as exc:
                    log.warning("%s: kill failed, retrying next poll: %s", self._label, exc)
                if kill_sent:
                    info = self._fetch(job_id) or info
                    if info is not None:
                        failures = 0

            target = self._target_state(info, failures, kill_sent, polls_since_kill)
            if kill_sent:
                polls_since_kill += 1
            if target is None:
                continue

            changes = {"jobStatus": target.value}
            if target.terminal:
                ctx.crash.hit("after_terminal_mapping")
                changes.update(self._times(info, target, record))
                self.stage_outputs(job_id)
                changes["message"] = self.staging_message
                self._update(changes, attempts=50)
                ctx.crash.hit("after_terminal_write")
                log.info("%s: remote job %s finished as %s", self._label, job_id, target.value)
                return target
            changes.update(self._times(info, target, record))
            updated = self._update(changes)
            if updated is not None and updated.status is BridgeState.RUNNING:
                ctx.crash.hit("mid_monitor")

    def _target_state(self, info: Optional[RemoteJobInfo], failures: int, kill_sent: bool,
                      polls_since_kill: int) -> Optional[BridgeState]:
        if info is None:
            return BridgeState.UNKNOWN if failures >= UNKNOWN_AFTER_FAILURES else None
        mapped = self.ctx.adapter.map_state(info.remote_state)
        if not kill_sent:
            return mapped
        if mapped is BridgeState.DONE:
            return mapped
        if mapped.terminal or polls_since_kill >= UNKNOWN_AFTER_FAILURES:
            return BridgeState.KILLED
        return mapped

    def _times(self, info: Optional[RemoteJobInfo], target: BridgeState, record: JobRecord) -> dict[str, str]:
        now = self.ctx.clock.now()
        out = {}
        started = info.start_time if info is not None else None
        if not record.data.get("startTime"):
            if started is not None:
                out["startTime"] = rfc3339(started)
            elif target in (BridgeState.RUNNING, BridgeState.DONE):
                out["startTime"] = rfc3339(now)
        if target.terminal:
            ended = info.end_time if info is not None else None
            out["endTime"] = rfc3339(ended if ended is not None else now)
        return out

    # -- outputs ---------------------------------------------------------------

    def stage_outputs(self, job_id: str) -> list[str]:
        """Download the declared output files and upload them to the bucket."""
        ctx, spec = self.ctx, self.ctx.spec
        self.staging_message = ""
        if not spec.upload_files:
            return []
        problems = []
        local_files = []
        ctx.downloads_dir.mkdir(parents=True, exist_ok=True)
        for path in spec.upload_files:
            try:
                content = ctx.adapter.fetch_output(self.session, job_id, path)
            except AdapterError as exc:
                problems.append(f"{path}: {exc.__class__.__name__}")
                continue
            local = ctx.downloads_dir / path.lstrip("/")
            local.parent.mkdir(parents=True, exist_ok=True)
            local.write_bytes(content)
            local_files.append((path, local))
        ctx.crash.hit("before_output_upload")
        keys: list[str] = []
        if local_files:
            if ctx.storage is None:
                problems.append("no object storage configured")
            else:
                try:
                    keys = upload_outputs(ctx.storage, spec.upload_bucket,
                                          [(path, local.read_bytes()) for path, local in local_files])
                except StagingError as exc:
                    problems.append(f"upload failed: {exc}")
        ctx.crash.hit("after_output_upload")
        if problems:
            self.staging_message = "output staging incomplete: " + "; ".join(problems)
            log.warning("%s: %s", self._label, self.staging_message)
        return keys


def run_worker(key: Key, store: FileStore, **kwargs) -> int:
    """Build a context and run the worker; fatal setup errors become exit 2."""
    try:
        ctx = build_context(key, store, **kwargs)
    except NotFound:
        log.error("%s/%s: no job record", *key)
        return EXIT_FATAL
    except (BridgeError, ValueError, KeyError) as exc:
        log.error("%s/%s: cannot start worker: %s", key[0], key[1], exc)
        return EXIT_FATAL
    try:
        return BridgeWorker(ctx).run()
    finally:
        ctx.adapter.close()
        if ctx.storage is not None:
            ctx.storage.close()


def main(environ=None) -> int:
    environ = os.environ if environ is None else environ
    logging.basicConfig(level=environ.get("BRIDGE_LOG_LEVEL", "INFO"),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    namespace, name = environ.get("NAMESPACE"), environ.get("JOBNAME")
    if not namespace or not name:
        log.error("NAMESPACE and JOBNAME must be set")
        return EXIT_FATAL
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    store = FileStore(environ.get("BRIDGE_STATE_DIR", "state"))
    return run_worker(
        (namespace, name),
        store,
        credentials_dir=environ.get("BRIDGE_CREDENTIALS_DIR", DEFAULT_CREDENTIALS_DIR),
        s3_credentials_dir=environ.get("BRIDGE_S3_CREDENTIALS_DIR", DEFAULT_S3_CREDENTIALS_DIR),
        downloads_root=environ.get("BRIDGE_DOWNLOADS_DIR", "downloads"),
        clock=clock_from_env(environ),
        stop=stop,
        crash=CrashPlan.from_env(environ),
    )


if __name__ == "__main__":
    sys.exit(main())
