"""End-to-end exit criteria; each test prints one PASS/FAIL line."""

import contextlib
import os
import random
import threading
import time

import pytest
import yaml
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from bridge_operator.adapters import map_remote_state
from bridge_operator.cli import main as cli_main
from bridge_operator.clock import ScaledClock, VirtualClock, parse_rfc3339
from bridge_operator.errors import VersionConflict
from bridge_operator.jobspec import BridgeState, parse_spec, validate_transition
from bridge_operator.launchers import ProcessLauncher, ThreadLauncher
from bridge_operator.mocks import FaultPlan, MockConfig
from bridge_operator.reconciler import Operator
from bridge_operator.serving import ServerThread
from bridge_operator.service import create_app
from bridge_operator.statestore import FileStore
from bridge_operator.storage import S3Client
from bridge_operator.worker import CRASH_POINTS, EXIT_DONE, EXIT_FAILED, SUBMIT_FAILED_MESSAGE, run_worker

from conftest import S3_ACCESS, S3_SECRET, SLURM_TOKEN, SLURM_USER, UPLOAD_BUCKET
from helpers import create_job, wait_for, worker_kwargs

pytestmark = pytest.mark.acceptance

STATES = list(BridgeState)


def config(**kw) -> MockConfig:
    return MockConfig(users={SLURM_USER: SLURM_TOKEN}, **kw)


@pytest.fixture
def report(request, capsys):
    @contextlib.contextmanager
    def criterion(label: str):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\nFAIL  {label}")
            raise
        with capsys.disabled():
            print(f"\nPASS  {label}")

    return criterion


def history(store, key, stop: threading.Event) -> list[str]:
    seen: list[str] = []
    watch = store.watch(f"{key[0]}/{key[1]}")

    def pump():
        while not stop.is_set():
            event = watch.get(timeout=0.02)
            if event is not None and event.record.data:
                status = event.record.data["jobStatus"]
                if not seen or seen[-1] != status:
                    seen.append(status)
        watch.close()

    threading.Thread(target=pump, daemon=True).start()
    return seen


# 1 -----------------------------------------------------------------------------

def _happy_run(make_env):
    clock = VirtualClock()
    env = make_env(clock, config=config(pending_s=1, running_s=2))
    spec = parse_spec(env.document())
    launcher = ThreadLauncher(env.store, clock, env.credentials_dir, env.s3_credentials_dir, env.downloads)
    op = Operator(env.store, launcher, clock=clock).start()
    try:
        op.reconcile_created(spec)
        wait_for(lambda: op.job_status(spec.key).state.terminal)
        wait_for(lambda: launcher.audit.live[spec.key] == 0)
        data = env.store.get_record(spec.key).data
        uploaded = env.objects.get(UPLOAD_BUCKET, "slurmjob.out")
        rendered = env.slurm.get(int(data["id"])).outputs["slurmjob.out"]
        for key in list(env.store.keys()):
            op.reconcile_deleted(key)
    finally:
        op.stop()
    return data, uploaded, rendered


def test_happy_path(make_env, tmp_path, report):
    with report("1 happy path: DONE, startTime <= endTime, output uploaded, deterministic"):
        first, uploaded, rendered = _happy_run(make_env)
        assert first["jobStatus"] == "DONE"
        assert parse_rfc3339(first["startTime"]) <= parse_rfc3339(first["endTime"])
        assert uploaded is not None and uploaded == rendered
        second, uploaded2, rendered2 = _happy_run(make_env)
        # Mock ports and the per-record client-name nonce differ between runs; the outcome must not.
        outcome = ("jobStatus", "id", "startTime", "endTime", "message", "kill")
        assert [second[k] for k in outcome] == [first[k] for k in outcome]
        assert second["clientName"] != first["clientName"]
        assert uploaded2 == rendered2


# 2 -----------------------------------------------------------------------------

def test_restart_idempotency_sweep(make_env, tmp_path, report):
    scale = 0.05
    with report(f"2 restart idempotency: {len(CRASH_POINTS)} crash points, one effective remote job each"):
        assert len(CRASH_POINTS) >= 6
        clock = ScaledClock(scale)
        env = make_env(clock, config=config(pending_s=1, running_s=2))
        specs = {point: parse_spec(env.document(name=f"crash-{i}")) for i, point in enumerate(CRASH_POINTS)}
        extra = {
            spec.key: {"BRIDGE_CRASH_AT": point, "BRIDGE_CRASH_MARKER": str(tmp_path / "markers" / spec.name)}
            for point, spec in specs.items()
        }
        launcher = ProcessLauncher(env.store.root, env.credentials_dir, env.s3_credentials_dir, env.downloads,
                                   time_scale=scale, extra_env=extra)
        op = Operator(env.store, launcher, clock=clock, refresh_interval=0.05).start()
        try:
            for spec in specs.values():
                op.reconcile_created(spec)
            for spec in specs.values():
                wait_for(lambda s=spec: op.job_status(s.key).state.terminal, timeout=90)
                wait_for(lambda s=spec: launcher.audit.live[s.key] == 0, timeout=30)
        finally:
            op.stop()
        failures = []
        for point, spec in specs.items():
            client = env.store.get_record(spec.key).data["clientName"]
            crashed = (tmp_path / "markers" / spec.name).exists()
            state = env.store.get_record(spec.key).status
            effective = env.slurm.effective_jobs(client)
            # A crash after the terminal write leaves a finished record, so no restart is due.
            launches = 1 if point == "after_terminal_write" else 2
            if not (crashed and effective == 1 and state is BridgeState.DONE
                    and launcher.audit.launches[spec.key] == launches and launcher.audit.peak[spec.key] == 1):
                failures.append((point, crashed, effective, state, launcher.audit.launches[spec.key]))
        assert failures == []
        assert env.slurm.submit_requests == len(CRASH_POINTS)


# 3 -----------------------------------------------------------------------------

def test_kill_propagation(make_env, tmp_path, report):
    rng = random.Random(20240101)
    with report("3 kill propagation: DELETE within 2 s of commit, KILLED, exit 1 (10 random times)"):
        trials = 0
        for trial in range(10):
            clock = VirtualClock()
            env = make_env(clock, config=config(pending_s=1, running_s=30))
            env.store = FileStore(tmp_path / f"kill-{trial}")
            key = create_job(env, env.document(interval=1))
            at = clock.now() + rng.uniform(1.0, 29.0)
            committed = []

            def commit(env=env, key=key, clock=clock, committed=committed):
                if env.store.get_record(key).status is BridgeState.RUNNING:
                    env.store.modify(key, lambda r: {"kill": "true"})
                    committed.append(clock.now())

            clock.call_at(at, commit)
            code = run_worker(key, env.store, **worker_kwargs(env, clock))
            kills = [r for r in env.slurm.faults.requests() if r.method == "DELETE"]
            if not committed:
                # Commit landed while the record still said SUBMITTED; not a RUNNING-phase trial.
                continue
            assert code == EXIT_FAILED
            assert env.store.get_record(key).data["jobStatus"] == "KILLED"
            assert len(kills) == 1 and 0 <= kills[0].time - committed[0] <= 2.0
            trials += 1
        assert trials >= 8


# 4 -----------------------------------------------------------------------------

def test_failure_paths(make_env, report):
    with report("4 failure paths: reject -> FAILED, remote FAILED -> FAILED, 3 drops -> UNKNOWN -> RUNNING -> DONE"):
        clock = VirtualClock()
        env = make_env(clock)
        env.slurm.faults.set_plan(FaultPlan(reject_submits=True))
        key = create_job(env, env.document())
        assert run_worker(key, env.store, **worker_kwargs(env, clock)) == EXIT_FAILED
        data = env.store.get_record(key).data
        assert data["jobStatus"] == "FAILED" and data["message"] == SUBMIT_FAILED_MESSAGE

        clock = VirtualClock()
        env = make_env(clock, config=config(final_state="FAILED"))
        env.store = FileStore(env.store.root.parent / "state-failed")
        key = create_job(env, env.document())
        assert run_worker(key, env.store, **worker_kwargs(env, clock)) == EXIT_FAILED
        assert env.store.get_record(key).data["jobStatus"] == "FAILED"

        clock = VirtualClock()
        env = make_env(clock, config=config(pending_s=1, running_s=10))
        env.store = FileStore(env.store.root.parent / "state-drops")
        key = create_job(env, env.document())
        clock.call_at(clock.now() + 1.5, lambda: env.slurm.faults.set_plan(FaultPlan(drop_next=3)))
        stop = threading.Event()
        seen = history(env.store, key, stop)
        assert run_worker(key, env.store, **worker_kwargs(env, clock)) == EXIT_DONE
        time.sleep(0.1)
        stop.set()
        tail = seen[seen.index("UNKNOWN"):]
        assert tail == ["UNKNOWN", "RUNNING", "DONE"]


# 5 -----------------------------------------------------------------------------

def test_deletion_cleanup(make_env, report):
    scale = 0.02
    with report("5 deletion cleanup: worker terminated, record gone, no polls after quiescence"):
        clock = ScaledClock(scale)
        env = make_env(clock, config=config(pending_s=1, running_s=600))
        spec = parse_spec(env.document(interval=1))
        launcher = ThreadLauncher(env.store, clock, env.credentials_dir, env.s3_credentials_dir, env.downloads)
        op = Operator(env.store, launcher, clock=clock).start()
        try:
            op.reconcile_created(spec)
            runner = op.workers[spec.key].runner
            wait_for(lambda: op.job_status(spec.key).state is BridgeState.RUNNING)
            op.reconcile_deleted(spec.key)
            assert not runner.alive()
            assert launcher.audit.live[spec.key] == 0
            assert spec.key not in env.store.keys()
            time.sleep(5 * scale)
            settled = len(env.slurm.faults.requests())
            time.sleep(30 * scale)
            assert len(env.slurm.faults.requests()) == settled
        finally:
            op.stop()


# 6 -----------------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["slurm", "lsf"]), st.text())
def _mapping_is_total(kind, text):
    assert isinstance(map_remote_state(kind, text), BridgeState)


def test_state_machine_properties(tmp_path, report):
    with report("6 state machine: 10000 random sequences, total mapping, 8-writer CAS"):
        rng = random.Random(7)
        for _ in range(10_000):
            state = BridgeState.NEW
            for _ in range(rng.randint(1, 20)):
                nxt = rng.choice(STATES)
                allowed = validate_transition(state, nxt)
                if state.terminal:
                    assert not allowed
                if allowed:
                    state = nxt
        _mapping_is_total()

        store = FileStore(tmp_path / "cas")
        key = ("default", "cas")
        store.create_record(key, {"jobStatus": "NEW", "kill": "false"})
        per_writer, writers = 40, 8
        barrier = threading.Barrier(writers)

        def writer(tag):
            barrier.wait()
            for i in range(per_writer):
                while True:
                    current = store.get_record(key)
                    try:
                        store.update_record(key, {"message": f"{tag}-{i}"}, current.version)
                        break
                    except VersionConflict:
                        continue

        threads = [threading.Thread(target=writer, args=(t,)) for t in range(writers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert store.get_record(key).version == 1 + writers * per_writer


# 7 -----------------------------------------------------------------------------

def test_pipeline_contract(make_env, tmp_path, report):
    with report("7 pipeline: exit 0 on DONE, exit 1 on remote FAILED, no record left either way"):
        clock = ScaledClock(0.02)
        env = make_env(clock, config=config(pending_s=1, running_s=2))
        launcher = ThreadLauncher(env.store, clock, env.credentials_dir, env.s3_credentials_dir, env.downloads)
        op = Operator(env.store, launcher, clock=clock).start()
        path = tmp_path / "job.yaml"
        path.write_text(yaml.safe_dump(env.document()))
        try:
            with ServerThread(create_app(op, watch_poll=0.02)) as server:
                ok = CliRunner().invoke(cli_main, ["--endpoint", server.url, "pipeline", str(path)])
                assert ok.exit_code == 0, ok.output
                assert env.store.keys() == []
                env.slurm.config.final_state = "FAILED"
                failed = CliRunner().invoke(cli_main, ["--endpoint", server.url, "pipeline", str(path)])
                assert failed.exit_code == 1, failed.output
                assert env.store.keys() == []
        finally:
            op.stop()


# 8 -----------------------------------------------------------------------------

def test_staging_round_trip(make_env, report):
    rng = random.Random(64)
    sizes = [1, 64 << 20] + [rng.randint(2, 64 << 20) for _ in range(3)] + [rng.randint(2, 4096) for _ in range(3)]
    with report(f"8 staging round trip: {len(sizes)} random payloads, 1 B to 64 MiB, byte-identical"):
        env = make_env(VirtualClock())
        client = S3Client(env.s3_endpoint, S3_ACCESS, S3_SECRET)
        try:
            client.make_bucket("roundtrip")
            for i, size in enumerate(sizes):
                data = os.urandom(size)
                client.put_object("roundtrip", f"payload/{i}.bin", data)
                assert client.get_object("roundtrip", f"payload/{i}.bin") == data
        finally:
            client.close()
