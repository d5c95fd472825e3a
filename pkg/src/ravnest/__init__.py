"""Desk-scale decentralized asynchronous training testbed.

GA-driven cluster formation over heterogeneous nodes, zero-bubble
asynchronous model-parallel pipelines within clusters, and parallel
multi-ring all-reduce parameter averaging across clusters, all executed
over a deterministic discrete-event network.
"""

from .clusterform import (
    GAParams,
    ModelFootprint,
    SessionPlan,
    evaluate,
    evolve,
    plan_session,
)
from .errors import RavnestError
from .modelcore import (
    Batch,
    ModelSpec,
    ParameterVector,
    SubmodelSpec,
    apply_update,
    backward,
    build_model,
    forward,
    partition_model,
)
from .multiring import (
    RingSchedule,
    allreduce_cost,
    build_ring_schedule,
    run_allreduce,
)
from .orchestrator import TrainConfig, TrainResult, measure_convergence, train
from .pipeline import ClusterPipeline, PipelineConfig, measure_bubble
from .simnet import EventQueue, LinkSpec, Message, Network, NodeSpec

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ClusterPipeline",
    "EventQueue",
    "GAParams",
    "LinkSpec",
    "Message",
    "ModelFootprint",
    "ModelSpec",
    "Network",
    "NodeSpec",
    "ParameterVector",
    "PipelineConfig",
    "RavnestError",
    "RingSchedule",
    "SessionPlan",
    "SubmodelSpec",
    "TrainConfig",
    "TrainResult",
    "allreduce_cost",
    "apply_update",
    "backward",
    "build_model",
    "build_ring_schedule",
    "evaluate",
    "evolve",
    "forward",
    "measure_bubble",
    "measure_convergence",
    "partition_model",
    "plan_session",
    "run_allreduce",
    "train",
]
