"""FastBFT: TEE-assisted Byzantine fault tolerance with tree aggregation, plus a simulator."""

from .client import Client, verify_reply
from .config import ProtocolConfig
from .replica import Replica
from .simnet import DelayModel, FaultSpec, MetricsReport, Scenario, ScenarioError, count_messages, run
from .tee import TEE, TeeError
from .topology import TreeTopology, build_tree, new_tree_after_suspect

__all__ = [
    "Client",
    "DelayModel",
    "FaultSpec",
    "MetricsReport",
    "ProtocolConfig",
    "Replica",
    "Scenario",
    "ScenarioError",
    "TEE",
    "TeeError",
    "TreeTopology",
    "build_tree",
    "count_messages",
    "new_tree_after_suspect",
    "run",
    "verify_reply",
]
