"""Sandboxed evaluation of candidate artifacts.

Harness protocol: the task's harness command receives the candidate artifact
path as argument 1 and the task data directory as argument 2. A run succeeds
iff it exits 0 and the final stdout line is ``SCORE <decimal>``. Anything else
is a failure with a reason.
"""

from __future__ import annotations

import ast
import enum
import json
import logging
import math
import os
import re
import resource
import signal
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

FAILED_REWARD = -1e18
LOG_TAIL_BYTES = 64 * 1024
GRACE_SECONDS = 2.0

_SCORE_RE = re.compile(r"^SCORE ([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)$")


class EvalMode(str, enum.Enum):
    DRY_RUN = "dry_run"
    FULL = "full"


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class Limits:
    wall_clock: float = 10.0
    memory: int = 512 * 1024 * 1024

    def __post_init__(self) -> None:
        if not self.wall_clock > 0:
            raise ValueError(f"wall_clock must be > 0, got {self.wall_clock}")
        if not self.memory > 0:
            raise ValueError(f"memory must be > 0, got {self.memory}")


@dataclass(frozen=True)
class EvalRequest:
    code: str
    task_ref: str
    limits: Limits = field(default_factory=Limits)
    mode: EvalMode = EvalMode.FULL
    request_id: str = ""


@dataclass(frozen=True)
class EvalResult:
    """Structured outcome of one evaluation.

    ``score`` is set iff the evaluation succeeded and ``reason`` is set iff it
    failed. A successful dry run carries ``score=0.0``; it only certifies
    well-formedness and constraint compliance.
    """

    status: str
    score: float | None = None
    reason: str | None = None
    runtime_ms: float = 0.0
    constraint_ok: bool = True
    logs: str = ""

    def __post_init__(self) -> None:
        if self.status not in ("success", "failure"):
            raise ValueError(f"unknown status {self.status!r}")
        if (self.status == "success") != (self.score is not None):
            raise ValueError("score must be present exactly when status is success")
        if (self.status == "failure") != (self.reason is not None):
            raise ValueError("reason must be present exactly when status is failure")
        if self.runtime_ms < 0:
            raise ValueError("runtime_ms must be nonnegative")

    @classmethod
    def success(cls, score: float, **kw: Any) -> EvalResult:
        return cls(status="success", score=float(score), **kw)

    @classmethod
    def failure(cls, reason: str, **kw: Any) -> EvalResult:
        return cls(status="failure", reason=reason, **kw)

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalResult:
        return cls(**data)


def python_syntax(code: str) -> str | None:
    try:
        ast.parse(code)
    except SyntaxError as exc:
        return f"syntax error: {exc.msg} (line {exc.lineno})"
    return None


@dataclass(frozen=True)
class TaskSpec:
    """Binds a task id to its harness command and constraint checker.

    ``check`` inspects the artifact text and returns a violation reason or
    None. ``data`` is written to ``<data dir>/task.json`` for the harness.
    """

    id: str
    command: tuple[str, ...]
    description: str = ""
    objective: str = "score"
    direction: str = "maximize"
    data: dict[str, Any] = field(default_factory=dict)
    constraints: tuple[str, ...] = ()
    suffix: str = ".py"
    check: Callable[[str], str | None] | None = None
    syntax: Callable[[str], str | None] = python_syntax


_TASKS: dict[str, TaskSpec] = {}
_TASKS_LOCK = threading.Lock()


def register_task(task: TaskSpec, *, replace: bool = False) -> None:
    with _TASKS_LOCK:
        if task.id in _TASKS and not replace:
            raise ValueError(f"task {task.id!r} already registered")
        _TASKS[task.id] = task


def get_task(task_id: str) -> TaskSpec:
    if task_id not in _TASKS:
        # builtin synthetic tasks register themselves on import
        import evoforest.testbed  # noqa: F401
    try:
        return _TASKS[task_id]
    except KeyError:
        raise UnknownTaskError(task_id) from None


def registered_tasks() -> list[str]:
    import evoforest.testbed  # noqa: F401

    return sorted(_TASKS)


@dataclass(frozen=True)
class ContainerConfig:
    image: str
    mounts: tuple[str, ...] = ()
    env_allowlist: tuple[str, ...] = ()
    docker: str = "docker"
    workdir: str = "/work"


def container_command(
    config: ContainerConfig,
    harness: Sequence[str],
    scratch: Path,
    artifact_name: str,
    limits: Limits,
    name: str,
) -> list[str]:
    """Build the ``docker run`` argv for one containerized evaluation."""
    cmd = [
        config.docker, "run", "--rm", "--name", name,
        "--network", "none",
        "--memory", f"{limits.memory}b",
        "--memory-swap", f"{limits.memory}b",
        "--pids-limit", "256",
        "-v", f"{scratch}:{config.workdir}",
    ]
    for mount in config.mounts:
        cmd += ["-v", mount]
    for var in config.env_allowlist:
        if var in os.environ:
            cmd += ["-e", f"{var}={os.environ[var]}"]
    cmd.append(config.image)
    cmd += list(harness)
    cmd += [f"{config.workdir}/{artifact_name}", f"{config.workdir}/data"]
    return cmd


def _child_env() -> dict[str, str]:
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "LANG": "C.UTF-8",
        "PYTHONHASHSEED": "0",
        "PYTHONDONTWRITEBYTECODE": "1",
        "OMP_NUM_THREADS": "1",
        "OPENBLAS_NUM_THREADS": "1",
    }
    return env


def _limit_child(memory: int, wall_clock: float) -> Callable[[], None]:
    cpu = int(math.ceil(wall_clock + GRACE_SECONDS))

    def apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (memory, memory))
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))

    return apply


def _tail(text: str, limit: int = LOG_TAIL_BYTES) -> str:
    data = text.encode("utf-8", "replace")
    if len(data) <= limit:
        return text
    return data[-limit:].decode("utf-8", "ignore")


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def parse_score(stdout: str) -> float | None:
    lines = stdout.rstrip().splitlines()
    if not lines:
        return None
    match = _SCORE_RE.match(lines[-1].strip())
    if match is None:
        return None
    value = float(match.group(1))
    return value if math.isfinite(value) else None


def _dry_run(task: TaskSpec, code: str) -> EvalResult:
    start = time.perf_counter()
    problem = task.syntax(code)
    if problem is None and task.check is not None:
        violation = task.check(code)
        if violation is not None:
            runtime = (time.perf_counter() - start) * 1000
            return EvalResult.failure(
                f"constraint violated: {violation}", constraint_ok=False, runtime_ms=runtime
            )
    runtime = (time.perf_counter() - start) * 1000
    if problem is not None:
        return EvalResult.failure(problem, runtime_ms=runtime)
    return EvalResult.success(0.0, runtime_ms=runtime, logs="dry run ok")


def evaluate(
    request: EvalRequest,
    backend_kind: str = "process",
    *,
    container: ContainerConfig | None = None,
) -> EvalResult:
    """Evaluate one candidate. Every failure comes back as a value."""
    task = get_task(request.task_ref)
    if request.mode == EvalMode.DRY_RUN:
        return _dry_run(task, request.code)
    if backend_kind not in ("process", "container"):
        raise ValueError(f"unknown executor backend {backend_kind!r}")
    if backend_kind == "container" and container is None:
        raise ValueError("container backend requires a ContainerConfig")

    limits = request.limits
    with tempfile.TemporaryDirectory(prefix="evoforest-eval-") as tmp:
        scratch = Path(tmp)
        artifact_name = "candidate" + task.suffix
        (scratch / artifact_name).write_text(request.code, encoding="utf-8")
        data_dir = scratch / "data"
        data_dir.mkdir()
        (data_dir / "task.json").write_text(json.dumps({"id": task.id, **task.data}), encoding="utf-8")

        if backend_kind == "container":
            name = f"evoforest-{uuid.uuid4().hex[:12]}"
            cmd = container_command(container, task.command, scratch, artifact_name, limits, name)
            popen_kw: dict[str, Any] = {}
        else:
            name = ""
            cmd = [*task.command, str(scratch / artifact_name), str(data_dir)]
            popen_kw = {
                "preexec_fn": _limit_child(limits.memory, limits.wall_clock),
                "env": _child_env(),
            }

        start = time.perf_counter()
        proc = subprocess.Popen(
            cmd,
            cwd=scratch,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
            **popen_kw,
        )
        timed_out = False
        try:
            out_b, err_b = proc.communicate(timeout=limits.wall_clock)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_group(proc)
            if name:
                subprocess.run([container.docker, "kill", name], capture_output=True)
            out_b, err_b = proc.communicate()
        runtime_ms = (time.perf_counter() - start) * 1000.0

    # scratch paths are random; mask them so failure reasons replay identically
    stdout = out_b.decode("utf-8", "replace").replace(str(scratch), "<sandbox>")
    stderr = err_b.decode("utf-8", "replace").replace(str(scratch), "<sandbox>")
    logs = _tail(stdout + stderr)
    rc = proc.returncode

    if timed_out:
        return EvalResult.failure(f"timeout after {limits.wall_clock:g}s", runtime_ms=runtime_ms, logs=logs)
    if rc != 0:
        # RLIMIT_AS surfaces as MemoryError in Python harnesses; docker OOM kills exit 137
        if "MemoryError" in stderr or rc in (-signal.SIGKILL, 137):
            return EvalResult.failure("memory limit", runtime_ms=runtime_ms, logs=logs)
        if rc == -signal.SIGXCPU:
            return EvalResult.failure(f"timeout after {limits.wall_clock:g}s", runtime_ms=runtime_ms, logs=logs)
        trailing = (stderr.strip() or stdout.strip()).splitlines()[-1:] or [""]
        trailing = trailing[0][-400:]
        return EvalResult.failure(f"exit status {rc}: {trailing}", runtime_ms=runtime_ms, logs=logs)
    score = parse_score(stdout)
    if score is None:
        return EvalResult.failure("malformed result", runtime_ms=runtime_ms, logs=logs)
    if task.check is not None:
        violation = task.check(request.code)
        if violation is not None:
            return EvalResult.failure(
                f"constraint violated: {violation}", runtime_ms=runtime_ms, constraint_ok=False, logs=logs
            )
    return EvalResult.success(score, runtime_ms=runtime_ms, logs=logs)


def evaluate_many(
    requests: Iterable[EvalRequest],
    workers: int = 2,
    backend_kind: str = "process",
    *,
    container: ContainerConfig | None = None,
) -> dict[str, EvalResult]:
    """Evaluate independent requests on a bounded pool, joined by request id."""
    reqs = list(requests)
    ids = [r.request_id or str(i) for i, r in enumerate(reqs)]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(evaluate, r, backend_kind, container=container) for r in reqs]
        return {rid: fut.result() for rid, fut in zip(ids, futures)}


def reward_from(result: EvalResult, parent_reward: float, sentinel: float = FAILED_REWARD) -> tuple[float, float]:
    """Map an evaluation to ``(reward, delta_reward)``; failures get the sentinel."""
    r = result.score if result.ok else sentinel
    return r, r - parent_reward


def passes_gate(reward: float, delta: float, gate: str = "delta") -> bool:
    """Admission gate for a new child: strict improvement by default."""
    if gate == "delta":
        return delta > 0
    if gate == "absolute":
        return reward > 0
    raise ValueError(f"unknown gate {gate!r}")


def python_harness(path: str | os.PathLike) -> tuple[str, ...]:
    """Harness command prefix running a standalone Python script in isolated mode."""
    return (sys.executable, "-I", str(path))
