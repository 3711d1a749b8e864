"""Evaluation harness for the builtin synthetic tasks.

    python harness.py <artifact> <data-dir>

Runs the candidate, reads ``PARAMS`` (numeric tasks) or ``TEXT`` (the edit
task) from its namespace, and prints ``SCORE <value>`` as the last line.
Stdlib only: the sandbox runs it without the package on ``sys.path``.
"""

import json
import math
import os
import sys
from collections import Counter


def quadratic(params, data):
    x = float(params[0])
    return data["height"] - (x - data["center"]) ** 2


def bimodal(params, data):
    x, y = float(params[0]), float(params[1])
    best = -math.inf
    for peak in data["peaks"]:
        cx, cy = peak["center"]
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        best = max(best, peak["height"] * math.exp(-d2 / (2.0 * peak["width"] ** 2)))
    return best


def token_overlap(text, data):
    cand = Counter(str(text).split())
    target = Counter(data["target"].split())
    return float(sum(min(n, cand[w]) for w, n in target.items()))


SCORERS = {"quadratic": quadratic, "bimodal": bimodal, "token_overlap": token_overlap}


def score(kind, value, data):
    return SCORERS[kind](value, data)


def main(argv):
    if len(argv) != 3:
        print("usage: harness.py <artifact> <data-dir>", file=sys.stderr)
        return 2
    artifact, data_dir = argv[1], argv[2]
    with open(os.path.join(data_dir, "task.json"), encoding="utf-8") as fh:
        task = json.load(fh)
    with open(artifact, encoding="utf-8") as fh:
        source = fh.read()
    namespace = {"__name__": "__candidate__"}
    exec(compile(source, artifact, "exec"), namespace)
    name = "TEXT" if task["kind"] == "token_overlap" else "PARAMS"
    value = score(task["kind"], namespace[name], task)
    sys.stdout.flush()
    print(f"SCORE {float(value)!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
