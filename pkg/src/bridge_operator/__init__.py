"""Drive batch jobs on external workload managers from declarative job documents."""

from .jobspec import BridgeJobSpec, BridgeState, parse_spec, validate_transition
from .statestore import FileStore, JobRecord

__version__ = "0.1.0"

__all__ = ["BridgeJobSpec", "BridgeState", "FileStore", "JobRecord", "parse_spec", "validate_transition"]
