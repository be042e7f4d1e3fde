import json
import subprocess
import sys
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridge_operator.errors import AlreadyExists, NotFound, StoreClosed, StoreError, VersionConflict
from bridge_operator.statestore import EventKind, FileStore

KEY = ("ns", "slurmjob-test")
BASE = {"resourceURL": "http://x", "id": "", "jobStatus": "NEW", "kill": "false"}


@pytest.fixture
def store(tmp_path):
    s = FileStore(tmp_path / "state")
    yield s
    s.close()


def test_create_and_get(store):
    record = store.create_record(KEY, BASE)
    assert record.version == 1
    assert store.get_record(KEY) == record
    assert store.path_for(KEY).name == "slurmjob-test.record"
    assert store.path_for(KEY).parent.name == "ns"


def test_create_twice(store):
    store.create_record(KEY, BASE)
    with pytest.raises(AlreadyExists):
        store.create_record(KEY, BASE)


def test_update_merges_and_bumps_version(store):
    store.create_record(KEY, BASE)
    r2 = store.update_record(KEY, {"id": "42", "jobStatus": "SUBMITTED"}, expected_version=1)
    assert r2.version == 2 and r2.data["id"] == "42" and r2.data["resourceURL"] == "http://x"
    r3 = store.update_record(KEY, {"message": "x"}, expected_version=2)
    assert r3.data["id"] == "42"
    with pytest.raises(VersionConflict):
        store.update_record(KEY, {"message": "y"}, expected_version=2)
    assert store.get_record(KEY).data["message"] == "x"


def test_versions_count_writes(store):
    store.create_record(KEY, BASE)
    for i in range(3):
        store.modify(KEY, lambda r, i=i: {"message": str(i)})
    assert store.get_record(KEY).version == 4


def test_id_is_immutable_once_set(store):
    store.create_record(KEY, BASE)
    store.update_record(KEY, {"id": "42"}, 1)
    with pytest.raises(StoreError):
        store.update_record(KEY, {"id": "43"}, 2)
    assert store.update_record(KEY, {"id": "42"}, 2).data["id"] == "42"


def test_invalid_status_rejected(store):
    with pytest.raises(StoreError):
        store.create_record(KEY, dict(BASE, jobStatus="BOGUS"))
    store.create_record(KEY, BASE)
    with pytest.raises(StoreError):
        store.update_record(KEY, {"jobStatus": "PAUSED"}, 1)


def test_missing_key(store):
    with pytest.raises(NotFound):
        store.get_record(KEY)
    with pytest.raises(NotFound):
        store.update_record(KEY, {"message": "x"}, 1)


def test_delete_is_idempotent(store):
    store.create_record(KEY, BASE)
    store.delete_record(KEY)
    with pytest.raises(NotFound):
        store.get_record(KEY)
    store.delete_record(KEY)
    assert store.keys() == []


def test_durable_across_store_instances(tmp_path):
    a = FileStore(tmp_path)
    a.create_record(KEY, BASE)
    a.update_record(KEY, {"id": "7"}, 1)
    a.close()
    b = FileStore(tmp_path)
    assert b.get_record(KEY).data == dict(BASE, id="7")
    assert b.get_record(KEY).version == 2


def test_durable_after_writer_process_is_killed(tmp_path):
    code = (
        "import os, sys\n"
        "from bridge_operator.statestore import FileStore\n"
        "s = FileStore(sys.argv[1])\n"
        "s.create_record(('ns', 'j'), {'id': '', 'jobStatus': 'NEW'})\n"
        "s.update_record(('ns', 'j'), {'id': '9', 'jobStatus': 'SUBMITTED'}, 1)\n"
        "os._exit(137)\n"
    )
    proc = subprocess.run([sys.executable, "-c", code, str(tmp_path)])
    assert proc.returncode == 137
    record = FileStore(tmp_path).get_record(("ns", "j"))
    assert record.version == 2 and record.data["id"] == "9"


def test_on_disk_format_is_versioned_json(store):
    store.create_record(KEY, BASE)
    body = json.loads(store.path_for(KEY).read_text())
    assert body == {"version": 1, "data": BASE}


def test_watch_sees_ordered_events(store):
    watch = store.watch("ns/")
    store.create_record(KEY, BASE)
    store.update_record(KEY, {"jobStatus": "SUBMITTED"}, 1)
    store.update_record(KEY, {"kill": "true"}, 2)
    store.delete_record(KEY)
    events = [watch.get(timeout=1) for _ in range(4)]
    assert [(e.kind, e.record.version) for e in events] == [
        (EventKind.CREATED, 1), (EventKind.UPDATED, 2), (EventKind.UPDATED, 3), (EventKind.DELETED, 3)]
    assert events[2].record.data["kill"] == "true"
    assert watch.get(timeout=0.05) is None


def test_watch_prefix_filters(store):
    watch = store.watch("other/")
    store.create_record(KEY, BASE)
    assert watch.get(timeout=0.05) is None


def test_no_mutations_no_events(store):
    store.create_record(KEY, BASE)
    watch = store.watch()
    assert watch.get(timeout=0.1) is None


def test_watch_closes_on_shutdown(tmp_path):
    s = FileStore(tmp_path)
    watch = s.watch()
    s.close()
    with pytest.raises(StoreClosed):
        watch.get(timeout=1)
    with pytest.raises(StoreClosed):
        s.get_record(KEY)


def test_closing_watch_unregisters(store):
    watch = store.watch()
    assert store.watcher_count() == 1
    watch.close()
    assert store.watcher_count() == 0


def test_refresh_publishes_other_writers(tmp_path):
    mine, theirs = FileStore(tmp_path), FileStore(tmp_path)
    watch = mine.watch()
    theirs.create_record(KEY, BASE)
    theirs.update_record(KEY, {"jobStatus": "SUBMITTED"}, 1)
    assert mine.refresh() == 1
    event = watch.get(timeout=1)
    assert event.record.version == 2 and event.record.data["jobStatus"] == "SUBMITTED"
    theirs.delete_record(KEY)
    mine.refresh()
    assert watch.get(timeout=1).kind is EventKind.DELETED
    assert mine.refresh() == 0


def concurrent_increments(store, writers: int, per_writer: int) -> None:
    barrier = threading.Barrier(writers)
    errors = []

    def writer(tag):
        barrier.wait()
        for i in range(per_writer):
            while True:
                current = store.get_record(KEY)
                try:
                    store.update_record(KEY, {"message": f"{tag}-{i}"}, current.version)
                    break
                except VersionConflict:
                    continue
                except Exception as exc:  # pragma: no cover - surfaced below
                    errors.append(exc)
                    return

    threads = [threading.Thread(target=writer, args=(t,)) for t in range(writers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_cas_with_eight_writers(store):
    store.create_record(KEY, BASE)
    concurrent_increments(store, 8, 25)
    assert store.get_record(KEY).version == 1 + 8 * 25


def test_cas_across_store_instances(tmp_path):
    FileStore(tmp_path).create_record(KEY, BASE)
    stores = [FileStore(tmp_path) for _ in range(4)]
    barrier = threading.Barrier(4)

    def writer(s):
        barrier.wait()
        for _ in range(20):
            s.modify(KEY, lambda r: {"message": str(r.version)}, attempts=1000)

    threads = [threading.Thread(target=writer, args=(s,)) for s in stores]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert FileStore(tmp_path).get_record(KEY).version == 81


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["update", "update", "kill", "delete", "create"]), min_size=1, max_size=25))
def test_watch_versions_are_contiguous(tmp_path_factory, ops):
    store = FileStore(tmp_path_factory.mktemp("w"))
    store.create_record(KEY, BASE)
    watch = store.watch()
    for op in ops:
        try:
            if op == "update":
                store.modify(KEY, lambda r: {"message": str(r.version)})
            elif op == "kill":
                store.modify(KEY, lambda r: {"kill": "true"})
            elif op == "delete":
                store.delete_record(KEY)
            else:
                store.create_record(KEY, BASE)
        except (NotFound, AlreadyExists):
            pass
    seen = []
    while (event := watch.get(timeout=0.01)) is not None:
        seen.append(event)
    # A suffix of the commit order: versions go up by one within each incarnation of the key.
    previous = 1
    for event in seen:
        if event.kind is EventKind.CREATED:
            assert event.record.version == 1
        elif event.kind is EventKind.UPDATED:
            assert previous is not None and event.record.version == previous + 1
        previous = None if event.kind is EventKind.DELETED else event.record.version
    store.close()
