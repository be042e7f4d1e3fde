"""Stand-ins for external resource managers and object storage, for tests and demos."""

from .faults import FaultPlan, FaultState, RequestLogEntry
from .objectstore import ObjectStoreMock, create_objectstore_app
from .resource import MockConfig, MockJob, ResourceManagerMock, create_lsf_app, create_resource_app, create_slurm_app

__all__ = [
    "FaultPlan",
    "FaultState",
    "MockConfig",
    "MockJob",
    "ObjectStoreMock",
    "RequestLogEntry",
    "ResourceManagerMock",
    "create_lsf_app",
    "create_objectstore_app",
    "create_resource_app",
    "create_slurm_app",
]
