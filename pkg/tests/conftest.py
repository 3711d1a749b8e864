from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evoforest.executor import EvalMode, EvalRequest, EvalResult  # noqa: E402
from evoforest.forest import Forest  # noqa: E402
from evoforest.testbed import get_synthetic  # noqa: E402


def ok(score: float) -> EvalResult:
    return EvalResult.success(score)


def fail(reason: str = "boom") -> EvalResult:
    return EvalResult.failure(reason)


def grow(forest: Forest, tid: str, parent: str, score: float | None, summary: str = "", code: str = "") -> str:
    """Add a child with ``score`` (or a failed evaluation when None)."""
    result = ok(score) if score is not None else fail()
    return forest.add_child(tid, parent, code or f"code {summary}", summary or f"step to {score}", result)


def closed_form_executor(request: EvalRequest) -> EvalResult:
    """In-process stand-in for the sandbox on the builtin tasks (same score functions)."""
    task = get_synthetic(request.task_ref)
    problem = task.check(request.code)
    if problem is not None:
        return EvalResult.failure(f"constraint violated: {problem}", constraint_ok=False)
    if request.mode == EvalMode.DRY_RUN:
        return EvalResult.success(0.0)
    return EvalResult.success(task.score(task.decode(request.code)))


@pytest.fixture
def fast_executor():
    return closed_form_executor


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
