from __future__ import annotations

import threading
import time

from bridge_operator.jobspec import parse_spec
from bridge_operator.reconciler import initial_record
from bridge_operator.worker import BridgeWorker, build_context, run_worker


def create_job(env, doc: dict):
    spec = parse_spec(doc)
    env.store.create_record(spec.key, initial_record(spec))
    return spec.key


def worker_kwargs(env, clock, **extra) -> dict:
    kw = dict(credentials_dir=env.credentials_dir, s3_credentials_dir=env.s3_credentials_dir,
              downloads_root=env.downloads, clock=clock)
    kw.update(extra)
    return kw


def run_job(env, clock, doc: dict, **extra) -> tuple[int, dict]:
    key = create_job(env, doc)
    code = run_worker(key, env.store, **worker_kwargs(env, clock, **extra))
    return code, env.store.get_record(key).data


def make_worker(env, clock, key, **extra) -> BridgeWorker:
    return BridgeWorker(build_context(key, env.store, **worker_kwargs(env, clock, **extra)))


def wait_for(predicate, timeout: float = 20.0, interval: float = 0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not met within %.1fs" % timeout)


def statuses_seen(store, key, until: threading.Event) -> list[str]:
    """Collect every committed jobStatus for ``key`` until ``until`` is set."""
    seen: list[str] = []
    watch = store.watch(f"{key[0]}/{key[1]}")

    def pump():
        while not until.is_set():
            event = watch.get(timeout=0.05)
            if event is not None and event.record.data:
                status = event.record.data.get("jobStatus")
                if not seen or seen[-1] != status:
                    seen.append(status)
        watch.close()

    threading.Thread(target=pump, daemon=True).start()
    return seen
