"""Two seeds evolve side by side and share one elite pool.

Shows that the pool admits trajectories from both lineages, that retrieval
from either tree draws examples from the other, and which modifications
earned the highest value so far.

    python demos/two_lineages.py
"""

import numpy as np

from evoforest import Orchestrator, RunConfig
from evoforest.elite_pool import trajectory_features
from evoforest.testbed import QUADRATIC


def main() -> None:
    config = RunConfig.from_dict({
        "seed": 3,
        "task": QUADRATIC.id,
        "epochs": 24,
        "sampling": {"beta": 0.0, "temperature": 0.1},
        "seeds": [
            {"code": QUADRATIC.encode([0.0]), "label": "starts left"},
            {"code": QUADRATIC.encode([6.0]), "label": "starts right"},
        ],
    })
    orch = Orchestrator(config)
    orch.run()
    state = orch.state

    for tree in state.forest.trees.values():
        best = tree.node(tree.best_node())
        print(f"{tree.id} ({tree.label}): {len(tree)} nodes, best {best.reward:.4f}")

    print("\nelite pool:")
    for entry in state.pool.trajectories:
        print(f"  {entry.source_tree}  reward {entry.final_reward:.4f}  depth {len(entry.trajectory) - 1}")

    rng = np.random.default_rng(0)
    for tid in state.forest.trees:
        tree = state.forest.tree(tid)
        query = trajectory_features(tree.trajectory(tree.best_node()))
        drawn = state.pool.sample_trajectories(query, 4, rng)
        print(f"\ncontext examples retrieved for {tid}: {[e.source_tree for e in drawn]}")

    print("\ntop modifications by value:")
    for m in state.pool.top_modifications(5):
        print(f"  value {m.value:+.4f}  mean {m.mean_gain:+.4f}  var {m.variance:.4f}  n={m.count}  {m.key}")


if __name__ == "__main__":
    main()
