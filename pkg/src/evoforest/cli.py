"""Command line entry point: run, resume, inspect and report.

Exit codes: 0 ok, 2 invalid configuration, 3 aborted run, 4 unreadable or
incompatible checkpoint, 5 unknown tree id.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any

from evoforest.checkpoint import CheckpointError, read_checkpoint
from evoforest.config import ConfigError, RunConfig
from evoforest.elite_pool import ElitePool
from evoforest.forest import Forest, NoViableCandidate
from evoforest.orchestrator import Orchestrator, RunAborted, RunResult, reward_series_csv
from evoforest.sexpr import fmt_reward, to_dot, to_sexpr

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_CHECKPOINT = 4
EXIT_LOOKUP = 5


def _set_path(data: dict[str, Any], dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot override inside a non-object value")
    node[keys[-1]] = value


def load_config(path: str, overrides: list[str], epochs: int | None, seed: int | None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<document>", "expected a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        _set_path(data, key, raw)
    if epochs is not None:
        data["epochs"] = epochs
    if seed is not None:
        data["seed"] = seed
    return RunConfig.from_dict(data)


def _print_best(result: RunResult, out=None) -> None:
    print(f"best: tree={result.tree_id} node={result.node_id} score={fmt_reward(result.reward)}", file=out or sys.stdout)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, args.set or [], args.epochs, args.seed)
        orch = Orchestrator(config, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _drive(orch, None)


def _drive(orch: Orchestrator, until: int | None) -> int:
    try:
        result = orch.run(until)
    except RunAborted as exc:
        where = exc.checkpoint or "(no checkpoint written)"
        print(f"run aborted: {exc}; checkpoint: {where}", file=sys.stderr)
        return EXIT_ABORTED
    orch.write_outputs()
    _print_best(result)
    print(f"outputs: {orch.out_dir}")
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    if args.extra_epochs < 0:
        print("--extra-epochs must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    path = Path(args.checkpoint)
    try:
        _, payload = read_checkpoint(path)
        if args.extra_epochs == 0:
            return _report(payload, sys.stdout)
        orch = Orchestrator.restore(path, out_dir=args.out or path.parent, extra_epochs=args.extra_epochs)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"checkpoint error: embedded configuration is invalid: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return _drive(orch, None)


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        _, payload = read_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    forest = Forest.from_dict(payload["state"]["forest"])
    render = to_dot if args.format == "dot" else to_sexpr
    if args.tree and not args.all:
        if args.tree not in forest.trees:
            known = ", ".join(forest.trees) or "none"
            print(f"unknown tree {args.tree!r} (known: {known})", file=sys.stderr)
            return EXIT_LOOKUP
        trees = [forest.trees[args.tree]]
    else:
        trees = list(forest.trees.values())
    for tree in trees:
        sys.stdout.write(render(tree))
    return EXIT_OK


def report_text(payload: dict[str, Any]) -> str:
    """Best-per-tree table, top-10 elite modifications and the reward series, all CSV."""
    forest = Forest.from_dict(payload["state"]["forest"])
    pool = ElitePool.from_dict(payload["state"]["pool"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write("# best per tree\n")
    w.writerow(["tree", "origin", "label", "best_node", "best_reward", "nodes"])
    for tree in forest.trees.values():
        try:
            best = tree.best_node()
            reward = repr(tree.node(best).reward)
        except NoViableCandidate:
            best, reward = "", ""
        w.writerow([tree.id, tree.origin.value, tree.label, best, reward, len(tree)])
    buf.write("\n# elite modifications (top 10 by value)\n")
    w.writerow(["rank", "key", "mean_gain", "variance", "count", "value"])
    for rank, m in enumerate(pool.top_modifications(10), 1):
        w.writerow([rank, m.key, repr(m.mean_gain), repr(m.variance), m.count, repr(m.value)])
    buf.write("\n# best reward per epoch\n")
    buf.write(reward_series_csv(payload["state"]["best_trace"]))
    return buf.getvalue()


def _report(payload: dict[str, Any], out) -> int:
    out.write(report_text(payload))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        _, payload = read_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return _report(payload, sys.stdout)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoforest", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="start a run from a JSON configuration")
    p.add_argument("config", help="path to the run configuration")
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration entry by dotted path; VALUE is parsed as JSON when possible")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue a run from its checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--extra-epochs", type=int, default=0, help="epochs to add to the configured total")
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("inspect", help="print trees from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--tree", help="tree id to print")
    p.add_argument("--all", action="store_true", help="print every tree (default when --tree is absent)")
    p.add_argument("--format", choices=("sexpr", "dot"), default="sexpr")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="summarize a checkpoint as CSV tables")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
