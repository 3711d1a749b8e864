"""Search the 1-D quadratic testbed end to end and show how the best score climbs.

Every candidate runs in the real process sandbox; proposals come from the
deterministic hill-climbing backend, so no model access is needed.

    python demos/quadratic_search.py [output_dir]
"""

import json
import sys
from pathlib import Path

from evoforest import Orchestrator, RunConfig
from evoforest.sexpr import to_sexpr

CONFIG = Path(__file__).parent / "configs" / "quadratic.json"


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-run")
    config = RunConfig.from_dict(json.loads(CONFIG.read_text()))
    orch = Orchestrator(config, out_dir=out)
    best = orch.run()
    orch.write_outputs()

    print("epoch  best reward")
    last = None
    for epoch, reward in enumerate(orch.state.best_trace):
        if reward != last:
            print(f"{epoch:5d}  {reward:.6f}")
            last = reward
    print(f"\nbest candidate ({best.tree_id}/{best.node_id}, reward {best.reward:.6f}):")
    print(best.code)
    tree = orch.state.forest.tree(best.tree_id)
    print("lineage of the best node:")
    for step in tree.trajectory(best.node_id).steps:
        print(f"  {step.node_id:>5}  {step.delta_reward:+.4f}  {step.modification_summary}")
    print(f"\nfull tree ({len(tree)} nodes) written to {out / 'forest.sexpr'}")
    print(to_sexpr(tree).splitlines()[0], "...")


if __name__ == "__main__":
    main()
