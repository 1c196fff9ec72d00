"""Flight scheduling for serverless DAG workflows."""

from .context import ExecutionContext, infer_context, make_follower_contexts
from .errors import RaptorError
from .flight import Action, FlightMember, Status, StateUpdate
from .listsched import ListSchedule, build_schedule, hu_priorities
from .manifest import ActionManifest, FunctionMask, TaskDag, apply_mask, build_dag, parse_manifest
from .simharness import SimConfig, SimResult, run_sim

__all__ = [
    "Action",
    "ActionManifest",
    "ExecutionContext",
    "FlightMember",
    "FunctionMask",
    "ListSchedule",
    "RaptorError",
    "SimConfig",
    "SimResult",
    "StateUpdate",
    "Status",
    "TaskDag",
    "apply_mask",
    "build_dag",
    "build_schedule",
    "hu_priorities",
    "infer_context",
    "make_follower_contexts",
    "parse_manifest",
    "run_sim",
]

__version__ = "0.1.0"
