from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import pytest
import yaml

from bridge_operator.adapters.credentials import write_credentials
from bridge_operator.clock import VirtualClock
from bridge_operator.mocks import (
    MockConfig,
    ObjectStoreMock,
    ResourceManagerMock,
    create_objectstore_app,
    create_resource_app,
)
from bridge_operator.serving import ServerThread
from bridge_operator.statestore import FileStore

SLURM_USER, SLURM_TOKEN = "bridge", "tok-7f3a9c2e51d8"
S3_ACCESS, S3_SECRET = "bridge-access", "sec-b41e07d9aa26"
SCRIPT_BUCKET, SCRIPT_KEY = "mys3bucket", "slurmbatch.sh"
SCRIPT_BODY = b"#!/bin/bash\nsrun hostname\n"
UPLOAD_BUCKET = "results"

SAMPLE_YAML = """\
kind: BridgeJob
apiVersion: bridgeoperator.ibm.com/v1alpha1
metadata:
  name: slurmjob-test
spec:
  resourceURL: http://my-slurm-cluster@hpc.com
  image: slurmpod:0.1
  resourcesecret: mysecret
  imagepullpolicy: Always
  updateinterval: 20
  jobdata:
    jobscript: "mys3bucket:slurmbatch.sh"
    scriptlocation: "s3"
    jobproperties: |
      {
      "NodesNumber":"1", "Queue": "V100", "Tasks": "2", "slurmJobName": "test",
      "currentWorkingDir": "path-to-test/test-script/",
      "envLibPath": "/usr/mpi/gcc/openmpi-4.0.3rc4/lib",
      "ErrorFileName": "slurmjob.err",
      "OutputFileName": "slurmjob.out"
      }
  s3storage:
    s3secret: mysecret-s3
    endpoint: s3endpoint.cloud
    secure: false
"""


def job_document(resource_url: str, s3_endpoint: str, name: str = "slurmjob-test", *, namespace=None,
                 interval: int = 1, kind: str = "slurm", upload=("slurmjob.out",), **spec_overrides) -> dict:
    """The sample job retargeted at local mocks, with outputs uploaded to ``results``."""
    doc = copy.deepcopy(yaml.safe_load(SAMPLE_YAML))
    doc["metadata"]["name"] = name
    if namespace:
        doc["metadata"]["namespace"] = namespace
    spec = doc["spec"]
    spec["resourceURL"] = resource_url
    spec["updateinterval"] = interval
    if kind != "slurm":
        spec.pop("image")
        spec["adapterkind"] = kind
    spec["s3storage"]["endpoint"] = s3_endpoint
    if upload:
        spec["s3upload"] = {"bucket": UPLOAD_BUCKET, "files": list(upload)}
    spec.update(spec_overrides)
    return doc


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def credentials(tmp_path):
    creds = tmp_path / "credentials"
    s3creds = tmp_path / "s3credentials"
    write_credentials(creds, "mysecret", username=SLURM_USER, token=SLURM_TOKEN)
    write_credentials(s3creds, "mysecret-s3", accessKey=S3_ACCESS, secretKey=S3_SECRET)
    return creds, s3creds


@dataclass
class Env:
    slurm: ResourceManagerMock
    objects: ObjectStoreMock
    slurm_url: str
    s3_endpoint: str
    store: FileStore
    credentials_dir: object
    s3_credentials_dir: object
    downloads: object

    def document(self, name="slurmjob-test", **kw) -> dict:
        return job_document(self.slurm_url, self.s3_endpoint, name, **kw)


def start_mocks(clock, flavor="slurm", config=None):
    slurm = ResourceManagerMock(flavor, clock=clock,
                                config=config or MockConfig(users={SLURM_USER: SLURM_TOKEN}))
    objects = ObjectStoreMock(access_keys={S3_ACCESS: S3_SECRET}, clock=clock)
    objects.put(SCRIPT_BUCKET, SCRIPT_KEY, SCRIPT_BODY)
    servers = [ServerThread(create_resource_app(slurm)).start(), ServerThread(create_objectstore_app(objects)).start()]
    return slurm, objects, servers


@pytest.fixture
def make_env(tmp_path, credentials):
    running = []

    def factory(clock, flavor="slurm", config=None) -> Env:
        slurm, objects, servers = start_mocks(clock, flavor, config)
        running.extend(servers)
        store = FileStore(tmp_path / "state")
        return Env(slurm, objects, servers[0].url, f"{servers[1].host}:{servers[1].port}", store,
                   credentials[0], credentials[1], tmp_path / "downloads")

    yield factory
    for server in running:
        server.stop()


@pytest.fixture
def env(make_env, clock) -> Env:
    return make_env(clock)


@pytest.fixture(autouse=True)
def _quiet_http_logs():
    logging.getLogger("httpx").setLevel(logging.WARNING)
