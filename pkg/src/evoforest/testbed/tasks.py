"""Builtin synthetic tasks with closed-form scores and known optima."""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from evoforest.executor import TaskSpec, python_harness, register_task
from evoforest.testbed import harness

HARNESS_PATH = Path(harness.__file__).resolve()
MAX_ARTIFACT_CHARS = 4096


def _assigned(code: str, name: str) -> Any:
    """Literal value of the last top-level ``name = ...`` assignment."""
    tree = ast.parse(code)
    value = None
    found = False
    for stmt in tree.body:
        if isinstance(stmt, ast.Assign) and any(isinstance(t, ast.Name) and t.id == name for t in stmt.targets):
            value = ast.literal_eval(stmt.value)
            found = True
    if not found:
        raise ValueError(f"no top-level {name} assignment")
    return value


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    description: str
    kind: str
    optimum: float
    optimum_params: Any
    seed_value: Any
    data: dict[str, Any] = field(default_factory=dict)
    bound: float = 100.0
    dim: int = 1
    vocabulary: tuple[str, ...] = ()
    constraints: tuple[str, ...] = ()

    @property
    def numeric(self) -> bool:
        return self.kind != "token_overlap"

    def score(self, value: Any) -> float:
        return float(harness.score(self.kind, value, {"kind": self.kind, **self.data}))

    def encode(self, value: Any) -> str:
        if self.numeric:
            body = ", ".join(repr(float(v)) for v in value)
            return f"# candidate for {self.id}\nPARAMS = [{body}]\n"
        return f"# candidate for {self.id}\nTEXT = {str(value)!r}\n"

    def decode(self, code: str) -> Any:
        value = _assigned(code, "PARAMS" if self.numeric else "TEXT")
        if self.numeric:
            if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise ValueError("PARAMS must be a list of numbers")
            return [float(v) for v in value]
        if not isinstance(value, str):
            raise ValueError("TEXT must be a string")
        return value

    @property
    def seed_code(self) -> str:
        return self.encode(self.seed_value)

    def check(self, code: str) -> str | None:
        if len(code) > MAX_ARTIFACT_CHARS:
            return f"artifact longer than {MAX_ARTIFACT_CHARS} characters"
        try:
            value = self.decode(code)
        except (ValueError, SyntaxError) as exc:
            return str(exc)
        if self.numeric:
            if len(value) != self.dim:
                return f"expected {self.dim} parameters, got {len(value)}"
            if not all(math.isfinite(v) and abs(v) <= self.bound for v in value):
                return f"parameters must be finite with magnitude <= {self.bound:g}"
        elif len(value.split()) > 4 * len(self.data["target"].split()):
            return "text too long"
        return None

    def spec(self) -> TaskSpec:
        return TaskSpec(
            id=self.id,
            command=python_harness(HARNESS_PATH),
            description=self.description,
            data={"kind": self.kind, **self.data},
            constraints=self.constraints,
            check=self.check,
        )


QUADRATIC = SyntheticTask(
    id="quadratic-1d",
    description="Maximize 10 - (x - 3)^2 over the single entry of PARAMS.",
    kind="quadratic",
    optimum=10.0,
    optimum_params=[3.0],
    seed_value=[0.0],
    data={"height": 10.0, "center": 3.0},
    dim=1,
    constraints=("PARAMS is a list of 1 finite number with magnitude <= 100", "artifact <= 4096 characters"),
)

BIMODAL = SyntheticTask(
    id="bimodal-2d",
    description="Maximize the larger of two Gaussian bumps over the two entries of PARAMS.",
    kind="bimodal",
    optimum=8.0,
    optimum_params=[4.0, 4.0],
    seed_value=[1.0, 1.0],
    data={
        "peaks": [
            {"center": [1.0, 1.0], "height": 5.0, "width": 0.75},
            {"center": [4.0, 4.0], "height": 8.0, "width": 0.75},
        ]
    },
    dim=2,
    constraints=("PARAMS is a list of 2 finite numbers with magnitude <= 100", "artifact <= 4096 characters"),
)

_TARGET = "fuse the inner loop and cache the shared tiles"

TOKEN_EDIT = SyntheticTask(
    id="token-edit",
    description="Edit TEXT to maximize token overlap with a hidden target phrase.",
    kind="token_overlap",
    optimum=float(len(_TARGET.split())),
    optimum_params=_TARGET,
    seed_value="",
    data={"target": _TARGET},
    vocabulary=(
        "the", "fuse", "split", "inner", "outer", "loop", "and", "or", "cache",
        "evict", "shared", "global", "tiles", "rows",
    ),
    constraints=("TEXT is a string", "at most 36 tokens"),
)


def builtin_tasks() -> list[SyntheticTask]:
    return [QUADRATIC, BIMODAL, TOKEN_EDIT]


_BY_ID = {t.id: t for t in builtin_tasks()}


def get_synthetic(task_id: str) -> SyntheticTask:
    return _BY_ID[task_id]


for _task in builtin_tasks():
    register_task(_task.spec(), replace=True)
