"""What the sandboxed executor reports for well-behaved and misbehaving candidates.

    python demos/sandbox_outcomes.py
"""

import sys

from evoforest import EvalRequest, Limits, TaskSpec, evaluate, register_task

# The harness simply runs the candidate file; real tasks ship their own harness.
register_task(TaskSpec(
    id="demo-raw",
    command=(sys.executable, "-I", "-c", "import runpy, sys; runpy.run_path(sys.argv[1], run_name='__main__')"),
    check=lambda code: "network access is not allowed" if "socket" in code else None,
), replace=True)

CASES = [
    ("reports a score", "print('SCORE 4.2')", Limits(wall_clock=5)),
    ("runs forever", "while True: pass", Limits(wall_clock=0.5)),
    ("allocates 2 GB", "x = bytearray(2 * 1024**3)", Limits(wall_clock=5, memory=256 * 1024**2)),
    ("forgets the score line", "print('finished')", Limits(wall_clock=5)),
    ("crashes", "raise RuntimeError('division plan failed')", Limits(wall_clock=5)),
    ("breaks a constraint", "import socket\nprint('SCORE 9')", Limits(wall_clock=5)),
]


def main() -> None:
    for label, code, limits in CASES:
        r = evaluate(EvalRequest(code=code, task_ref="demo-raw", limits=limits))
        detail = f"score {r.score}" if r.ok else r.reason
        print(f"{label:<24} {r.status:<8} {detail}  ({r.runtime_ms:.0f} ms)")


if __name__ == "__main__":
    main()
