"""Synthetic tasks and scripted agents for running the loop without a model."""

from evoforest.testbed.scripted import FAILURE_KINDS, HillClimber, scripted_hill_climber
from evoforest.testbed.tasks import BIMODAL, QUADRATIC, TOKEN_EDIT, SyntheticTask, builtin_tasks, get_synthetic

__all__ = [
    "BIMODAL",
    "FAILURE_KINDS",
    "HillClimber",
    "QUADRATIC",
    "SyntheticTask",
    "TOKEN_EDIT",
    "builtin_tasks",
    "get_synthetic",
    "scripted_hill_climber",
]
