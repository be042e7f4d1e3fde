"""Ways to run a worker: a thread in this process, or a separate OS process.

Both pass the same launch environment (``NAMESPACE``, ``JOBNAME``) and
report the worker's exit code through a callback. Each launcher also
counts live workers per key so tests can audit the single-worker rule.
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import threading
from collections import defaultdict
from pathlib import Path
from typing import Callable, Optional

from .adapters.credentials import DEFAULT_CREDENTIALS_DIR, DEFAULT_S3_CREDENTIALS_DIR
from .statestore import FileStore, Key
from .worker import EXIT_CRASHED, EXIT_FATAL, CrashPlan, SimulatedCrash, run_worker

log = logging.getLogger(__name__)

ExitCallback = Callable[[int], None]


class _LiveAudit:
    def __init__(self):
        self._lock = threading.Lock()
        self.live: dict[Key, int] = defaultdict(int)
        self.peak: dict[Key, int] = defaultdict(int)
        self.launches: dict[Key, int] = defaultdict(int)

    def started(self, key: Key) -> None:
        with self._lock:
            self.live[key] += 1
            self.launches[key] += 1
            self.peak[key] = max(self.peak[key], self.live[key])

    def finished(self, key: Key) -> None:
        with self._lock:
            self.live[key] -= 1


class ThreadWorker:
    def __init__(self, key: Key, thread: threading.Thread, stop: threading.Event):
        self.key = key
        self._thread = thread
        self._stop = stop

    def alive(self) -> bool:
        return self._thread.is_alive()

    def stop(self, timeout: float = 15.0) -> None:
        self._stop.set()
        if self._thread is not threading.current_thread():
            self._thread.join(timeout)
        if self._thread.is_alive():
            log.error("%s/%s: worker thread did not stop within %.0fs", *self.key, timeout)


class ThreadLauncher:
    """Workers as threads sharing this process's store (the default)."""

    def __init__(
        self,
        store: FileStore,
        clock=None,
        credentials_dir=DEFAULT_CREDENTIALS_DIR,
        s3_credentials_dir=DEFAULT_S3_CREDENTIALS_DIR,
        downloads_root="downloads",
        crash_plans: Optional[dict[Key, CrashPlan]] = None,
        adapter_factory=None,
    ):
        self.store = store
        self.clock = clock
        self.credentials_dir = credentials_dir
        self.s3_credentials_dir = s3_credentials_dir
        self.downloads_root = downloads_root
        self.crash_plans = crash_plans if crash_plans is not None else {}
        self.adapter_factory = adapter_factory
        self.audit = _LiveAudit()

    def launch(self, key: Key, env: dict[str, str], on_exit: ExitCallback) -> ThreadWorker:
        stop = threading.Event()
        # The thread reads its identity from the launch environment, as a process would.
        worker_key = (env["NAMESPACE"], env["JOBNAME"])

        def body():
            code = EXIT_FATAL
            try:
                code = run_worker(
                    worker_key,
                    self.store,
                    credentials_dir=self.credentials_dir,
                    s3_credentials_dir=self.s3_credentials_dir,
                    downloads_root=self.downloads_root,
                    clock=self.clock,
                    stop=stop,
                    crash=self.crash_plans.get(key) or CrashPlan(),
                    adapter_factory=self.adapter_factory,
                )
            except SimulatedCrash:
                code = EXIT_CRASHED
            except Exception:
                log.exception("%s/%s: worker raised", *key)
                code = EXIT_FATAL
            finally:
                self.audit.finished(key)
                on_exit(code)

        thread = threading.Thread(target=body, name=f"worker-{key[0]}-{key[1]}", daemon=True)
        self.audit.started(key)
        thread.start()
        return ThreadWorker(key, thread, stop)


class ProcessWorker:
    def __init__(self, key: Key, proc: subprocess.Popen):
        self.key = key
        self.proc = proc

    @property
    def pid(self) -> int:
        return self.proc.pid

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self, timeout: float = 10.0) -> None:
        if self.proc.poll() is not None:
            return
        self.proc.terminate()
        try:
            self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class ProcessLauncher:
    """Workers as ``python -m bridge_operator.worker`` child processes.

    Used when a test needs to kill a worker outright. Worker output goes to
    ``<log_dir>/<namespace>.<name>.log``.
    """

    def __init__(
        self,
        state_dir,
        credentials_dir=DEFAULT_CREDENTIALS_DIR,
        s3_credentials_dir=DEFAULT_S3_CREDENTIALS_DIR,
        downloads_root="downloads",
        time_scale: Optional[float] = None,
        log_dir=None,
        extra_env: Optional[dict[Key, dict[str, str]]] = None,
    ):
        self.state_dir = Path(state_dir)
        self.credentials_dir = credentials_dir
        self.s3_credentials_dir = s3_credentials_dir
        self.downloads_root = downloads_root
        self.time_scale = time_scale
        self.log_dir = Path(log_dir) if log_dir else self.state_dir / "_logs"
        self.extra_env = extra_env if extra_env is not None else {}
        self.audit = _LiveAudit()

    def launch(self, key: Key, env: dict[str, str], on_exit: ExitCallback) -> ProcessWorker:
        full_env = dict(os.environ)
        full_env.update(
            BRIDGE_STATE_DIR=str(self.state_dir),
            BRIDGE_CREDENTIALS_DIR=str(self.credentials_dir),
            BRIDGE_S3_CREDENTIALS_DIR=str(self.s3_credentials_dir),
            BRIDGE_DOWNLOADS_DIR=str(self.downloads_root),
        )
        if self.time_scale:
            full_env["BRIDGE_TIME_SCALE"] = str(self.time_scale)
        full_env.update(self.extra_env.get(key, {}))
        full_env.update(env)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(self.log_dir / f"{key[0]}.{key[1]}.log", "ab")
        self.audit.started(key)
        try:
            proc = subprocess.Popen([sys.executable, "-m", "bridge_operator.worker"], env=full_env,
                                    stdout=log_file, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL)
        except OSError:
            self.audit.finished(key)
            log_file.close()
            raise

        def wait():
            code = proc.wait()
            log_file.close()
            self.audit.finished(key)
            on_exit(code)

        threading.Thread(target=wait, name=f"reap-{key[0]}-{key[1]}", daemon=True).start()
        return ProcessWorker(key, proc)
