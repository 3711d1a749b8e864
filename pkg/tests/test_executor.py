import sys
import tempfile
import time
from pathlib import Path

import pytest

from evoforest.executor import (
    FAILED_REWARD,
    GRACE_SECONDS,
    LOG_TAIL_BYTES,
    ContainerConfig,
    EvalMode,
    EvalRequest,
    EvalResult,
    Limits,
    TaskSpec,
    UnknownTaskError,
    container_command,
    evaluate,
    evaluate_many,
    parse_score,
    passes_gate,
    register_task,
    reward_from,
)
from evoforest.testbed import BIMODAL, QUADRATIC, TOKEN_EDIT

# Pass-through harness: runs the candidate with the harness argv (artifact, data dir) intact.
PASS_THROUGH = (sys.executable, "-I", "-c", "import runpy, sys; runpy.run_path(sys.argv[1], run_name='__main__')")
RAW = TaskSpec(id="test-raw", command=PASS_THROUGH)
CHECKED = TaskSpec(
    id="test-checked",
    command=PASS_THROUGH,
    check=lambda code: "uses forbidden word" if "forbidden" in code else None,
)
register_task(RAW, replace=True)
register_task(CHECKED, replace=True)

FAST = Limits(wall_clock=5.0)


def run(code: str, task: str = "test-raw", limits: Limits = FAST, mode: EvalMode = EvalMode.FULL) -> EvalResult:
    return evaluate(EvalRequest(code=code, task_ref=task, limits=limits, mode=mode))


def test_result_invariants():
    with pytest.raises(ValueError):
        EvalResult(status="success")
    with pytest.raises(ValueError):
        EvalResult(status="failure", score=1.0, reason="x")
    with pytest.raises(ValueError):
        EvalResult.success(1.0, runtime_ms=-1)
    with pytest.raises(ValueError):
        Limits(wall_clock=0)
    with pytest.raises(ValueError):
        Limits(memory=0)
    r = EvalResult.failure("x")
    assert EvalResult.from_dict(r.to_dict()) == r


@pytest.mark.parametrize(
    "stdout, expected",
    [("SCORE 1.5", 1.5), ("noise\nSCORE -2e3\n", -2000.0), ("SCORE .5", 0.5), ("SCORE 1.5 extra", None),
     ("SCORE 1.5\nlater", None), ("", None), ("SCORE nan", None), ("SCORE inf", None)],
)
def test_parse_score(stdout, expected):
    assert parse_score(stdout) == expected


def test_success_returns_exact_score():
    r = run("print('warming up')\nprint('SCORE 1.25')\n")
    assert r.status == "success" and r.score == 1.25 and r.reason is None
    assert r.constraint_ok and r.runtime_ms > 0
    assert "warming up" in r.logs


def test_harness_receives_artifact_and_data_dir():
    code = (
        "import sys, json, pathlib\n"
        "art, data = sys.argv[1], sys.argv[2]\n"
        "assert pathlib.Path(art).read_text().startswith('import sys')\n"
        "spec = json.loads((pathlib.Path(data) / 'task.json').read_text())\n"
        "print('SCORE', 3 if spec['id'] == 'test-raw' else 0)\n"
    )
    assert run(code).score == 3.0


def test_timeout_is_reported_and_enforced():
    limits = Limits(wall_clock=0.5)
    start = time.perf_counter()
    r = run("import time\ntime.sleep(30)\n", limits=limits)
    elapsed = time.perf_counter() - start
    assert r.status == "failure" and r.reason == "timeout after 0.5s" and r.score is None
    assert 500 <= r.runtime_ms < 500 + GRACE_SECONDS * 1000
    assert elapsed < limits.wall_clock + GRACE_SECONDS


def test_timeout_kills_grandchildren():
    code = "import subprocess, sys, time\nsubprocess.Popen([sys.executable, '-c', 'import time; time.sleep(30)'])\ntime.sleep(30)\n"
    start = time.perf_counter()
    r = run(code, limits=Limits(wall_clock=0.5))
    assert r.reason == "timeout after 0.5s"
    assert time.perf_counter() - start < 0.5 + GRACE_SECONDS


def test_memory_limit():
    r = run("x = bytearray(2 * 1024**3)\nprint('SCORE 1')\n", limits=Limits(wall_clock=5, memory=256 * 1024**2))
    assert r.status == "failure" and r.reason == "memory limit"


def test_malformed_output():
    assert run("print('I am done')\n").reason == "malformed result"
    assert run("print('SCORE 2')\nprint('bye')\n").reason == "malformed result"
    assert run("").reason == "malformed result"


def test_nonzero_exit_reports_last_log_line():
    r = run("import sys\nprint('SCORE 1')\nsys.exit(3)\n")
    assert r.reason == "exit status 3: SCORE 1"
    r = run("raise ValueError('bad input')\n")
    assert r.reason == "exit status 1: ValueError: bad input"
    assert "Traceback" in r.logs
    assert "<sandbox>" in r.logs  # scratch paths are masked


def test_constraint_checker_runs_after_success():
    r = run("# forbidden\nprint('SCORE 1')\n", task="test-checked")
    assert r.status == "failure" and r.reason == "constraint violated: uses forbidden word"
    assert not r.constraint_ok
    assert run("print('SCORE 1')\n", task="test-checked").ok


def test_dry_run_checks_syntax_and_constraints_without_executing():
    good = run("print('SCORE 1')", mode=EvalMode.DRY_RUN)
    assert (good.status, good.score, good.logs) == ("success", 0.0, "dry run ok")
    bad = run("def f(:\n", mode=EvalMode.DRY_RUN)
    assert bad.reason.startswith("syntax error:") and bad.reason.endswith("(line 1)")
    forbidden = run("forbidden = 1", task="test-checked", mode=EvalMode.DRY_RUN)
    assert forbidden.reason == "constraint violated: uses forbidden word"
    slow = run("import time\ntime.sleep(30)", mode=EvalMode.DRY_RUN)
    assert slow.ok and slow.runtime_ms < 1000


def test_logs_are_bounded():
    r = run(f"print('x' * {LOG_TAIL_BYTES * 2})\nprint('SCORE 1')\n")
    assert r.ok and len(r.logs.encode()) <= LOG_TAIL_BYTES
    assert r.logs.rstrip().endswith("SCORE 1")


def test_scratch_directory_removed_afterwards():
    before = set(Path(tempfile.gettempdir()).glob("evoforest-eval-*"))
    run("print('SCORE 1')\n")
    assert set(Path(tempfile.gettempdir()).glob("evoforest-eval-*")) == before


def test_unknown_task_and_backend():
    with pytest.raises(UnknownTaskError):
        run("x", task="no-such-task")
    with pytest.raises(ValueError):
        evaluate(EvalRequest(code="x", task_ref="test-raw"), "teleport")
    with pytest.raises(ValueError):
        evaluate(EvalRequest(code="x", task_ref="test-raw"), "container")


def test_builtin_tasks_score_their_closed_forms():
    assert run(QUADRATIC.encode([3.0]), task=QUADRATIC.id).score == 10.0
    assert run(QUADRATIC.encode([1.0]), task=QUADRATIC.id).score == 6.0
    assert run(BIMODAL.encode([4.0, 4.0]), task=BIMODAL.id).score == 8.0
    assert run(TOKEN_EDIT.encode(TOKEN_EDIT.optimum_params), task=TOKEN_EDIT.id).score == 9.0


def test_concurrent_equals_sequential():
    requests = [
        EvalRequest(code=QUADRATIC.encode([x]), task_ref=QUADRATIC.id, request_id=f"r{i}")
        for i, x in enumerate([0.0, 1.5, 3.0, 4.25, -2.0, 7.0])
    ]
    requests.append(EvalRequest(code="print('nope')", task_ref="test-raw", request_id="bad"))
    parallel = evaluate_many(requests, workers=4)
    for req in requests:
        seq = evaluate(req)
        assert (parallel[req.request_id].status, parallel[req.request_id].score, parallel[req.request_id].reason) == (
            seq.status, seq.score, seq.reason
        )
    with pytest.raises(ValueError):
        evaluate_many([requests[0], requests[0]])


def test_container_command_shape(monkeypatch):
    monkeypatch.setenv("EVO_TOKEN", "abc")
    cfg = ContainerConfig(image="python:3.12", mounts=("/data:/data:ro",), env_allowlist=("EVO_TOKEN", "MISSING"))
    cmd = container_command(cfg, ("python", "/h.py"), Path("/tmp/s"), "candidate.py", Limits(1, 1024), "box")
    assert cmd[:5] == ["docker", "run", "--rm", "--name", "box"]
    assert ["--network", "none"] == cmd[5:7]
    assert "-e" in cmd and "EVO_TOKEN=abc" in cmd and not any("MISSING" in c for c in cmd)
    assert cmd[-4:] == ["python", "/h.py", "/work/candidate.py", "/work/data"]


def test_reward_mapping_and_gate():
    assert reward_from(EvalResult.success(1.5), 1.0) == (1.5, 0.5)
    r, dr = reward_from(EvalResult.success(1.0), 1.0)
    assert dr == 0.0 and not passes_gate(r, dr)
    r, dr = reward_from(EvalResult.failure("x"), 1.0)
    assert r == FAILED_REWARD and dr == FAILED_REWARD - 1.0
    assert passes_gate(0.1, -5, gate="absolute") and not passes_gate(-0.1, 5, gate="absolute")
    with pytest.raises(ValueError):
        passes_gate(1, 1, gate="other")
