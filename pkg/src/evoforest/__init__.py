"""Trajectory-conditioned program optimization over a forest of lineage trees."""

from evoforest.checkpoint import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    read_checkpoint,
    write_checkpoint,
)
from evoforest.config import ConfigError, RunConfig, SeedConfig
from evoforest.elite_pool import EliteModificationStats, ElitePool, EliteTrajectory, value
from evoforest.executor import EvalMode, EvalRequest, EvalResult, Limits, TaskSpec, evaluate, register_task
from evoforest.forest import AlgorithmNode, Forest, Origin, PhyloTree, Status, Trajectory
from evoforest.orchestrator import Orchestrator, RunAborted, RunResult, RunState, run
from evoforest.sexpr import ParseError, parse_sexpr, to_dot, to_sexpr

__version__ = "0.1.0"

__all__ = [
    "AlgorithmNode",
    "CheckpointError",
    "CheckpointIntegrityError",
    "CheckpointVersionError",
    "ConfigError",
    "EliteModificationStats",
    "ElitePool",
    "EliteTrajectory",
    "EvalMode",
    "EvalRequest",
    "EvalResult",
    "Forest",
    "Limits",
    "Orchestrator",
    "Origin",
    "ParseError",
    "PhyloTree",
    "RunAborted",
    "RunConfig",
    "RunResult",
    "RunState",
    "SeedConfig",
    "Status",
    "TaskSpec",
    "Trajectory",
    "evaluate",
    "parse_sexpr",
    "read_checkpoint",
    "register_task",
    "run",
    "to_dot",
    "to_sexpr",
    "value",
    "write_checkpoint",
]
