"""Node, branch and forest-level pruning.

Pruned nodes are tombstoned in place (``Status.PRUNED``) and physically
removed later by :meth:`Forest.compact`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evoforest.forest import Forest, NoViableCandidate, PhyloTree, Status
from evoforest.sampling import potential

HOPELESS = "hopeless"
LOW_POTENTIAL = "low_potential"
FOREST_CAPACITY = "forest_capacity"


@dataclass(frozen=True)
class RetentionWeights:
    alpha: float = 0.5  # normalized best reward
    beta: float = 0.3  # normalized depth-weighted reward
    gamma: float = 0.2  # potential
    depth_decay: float = 0.8

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "depth_decay"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0 < self.depth_decay <= 1:
            raise ValueError("depth_decay must be in (0, 1]")


def _marked(tree: PhyloTree, nid: str) -> bool:
    node = tree.nodes[nid]
    return node.status == Status.PRUNED or node.retained


def prune_hopeless(tree: PhyloTree, epoch: int = 0) -> list[str]:
    """Tombstone maximal all-regressing subtrees below the root.

    In each such subtree the node with the largest ``|delta_reward|`` survives
    as a retained Failed example; every other node is marked Pruned. Already
    pruned nodes count as regressing. Returns the roots of newly handled
    subtrees.
    """
    all_neg: dict[str, bool] = {}
    for node in reversed(list(tree.walk())):
        own = node.status == Status.PRUNED or node.delta_reward < 0
        all_neg[node.id] = own and all(all_neg[c] for c in tree.children.get(node.id, []))

    handled: list[str] = []
    for node in list(tree.walk()):
        if node.is_root or not all_neg[node.id] or all_neg[node.parent_id]:
            continue
        members = tree.subtree_ids(node.id)
        if all(_marked(tree, m) for m in members):
            continue
        already = [m for m in members if tree.nodes[m].retained]
        keep = None
        if not already:
            candidates = [tree.nodes[m] for m in members if tree.nodes[m].status != Status.PRUNED]
            keep = max(candidates, key=lambda n: (abs(n.delta_reward), -n.created_at, -n.seq))
            keep.retained = True
            if keep.status != Status.FAILED or not keep.reason:
                keep.reason = f"informative failure (dr={keep.delta_reward:.6f})"
            keep.status = Status.FAILED
        for m in members:
            n = tree.nodes[m]
            if n is keep or n.retained or n.status == Status.PRUNED:
                continue
            n.status = Status.PRUNED
            n.reason = HOPELESS
            n.pruned_at = epoch
        handled.append(node.id)
    return handled


def prune_low_potential(
    tree: PhyloTree, epoch: int, stagnation_rounds: int = 10, percentile: float = 25.0
) -> list[str]:
    """Tombstone stale, non-regressing leaves whose reward sits below a percentile.

    A leaf here has no Success children. Staleness counts epochs since the
    node was created or last received any child. The tree's best node and the
    root are never touched.
    """
    if stagnation_rounds < 1:
        raise ValueError("stagnation_rounds must be >= 1")
    if not 0 < percentile < 100:
        raise ValueError("percentile must be in (0, 100)")
    live = tree.success_nodes()
    if not live:
        return []
    threshold = float(np.percentile([n.reward for n in live], percentile))
    best = tree.best_node()
    pruned: list[str] = []
    for node in live:
        if node.is_root or node.id == best or node.delta_reward < 0 or not node.reward < threshold:
            continue
        kids = [tree.nodes[c] for c in tree.children.get(node.id, [])]
        if any(k.status == Status.SUCCESS for k in kids):
            continue
        last_activity = max([node.created_at] + [k.created_at for k in kids])
        if epoch - last_activity < stagnation_rounds:
            continue
        node.status = Status.PRUNED
        node.reason = LOW_POTENTIAL
        node.pruned_at = epoch
        pruned.append(node.id)
    return pruned


def weighted_reward(tree: PhyloTree, depth_decay: float) -> float | None:
    """Depth-weighted mean Success reward; deeper (more recent) nodes weigh more."""
    live = tree.success_nodes()
    if not live:
        return None
    max_depth = max(n.depth for n in live)
    weights = [depth_decay ** (max_depth - n.depth) for n in live]
    return math.fsum(w * n.reward for w, n in zip(weights, live)) / math.fsum(weights)


def minmax_norm(values: dict[str, float | None]) -> dict[str, float]:
    """Min-max scale; all-equal gives 0.5 and missing values give 0."""
    present = [v for v in values.values() if v is not None]
    if not present:
        return {k: 0.0 for k in values}
    lo, hi = min(present), max(present)
    out = {}
    for k, v in values.items():
        if v is None:
            out[k] = 0.0
        elif hi == lo:
            out[k] = 0.5
        else:
            out[k] = (v - lo) / (hi - lo)
    return out


def retain_scores(forest: Forest, weights: RetentionWeights, window: int = 5) -> dict[str, float]:
    trees = forest.trees
    best = minmax_norm({t: tree.best_reward() for t, tree in trees.items()})
    weighted = minmax_norm({t: weighted_reward(tree, weights.depth_decay) for t, tree in trees.items()})
    return {
        t: weights.alpha * best[t] + weights.beta * weighted[t] + weights.gamma * potential(tree, window)
        for t, tree in trees.items()
    }


def retain_score(tree: PhyloTree, forest: Forest, weights: RetentionWeights, window: int = 5) -> float:
    return retain_scores(forest, weights, window)[tree.id]


def prune_forest(forest: Forest, weights: RetentionWeights, window: int = 5) -> list[str]:
    """Drop lowest-retention trees until the forest fits its capacity.

    Scores are computed once on the incoming forest. Ties remove the older
    tree first. The tree holding the forest-wide best node is never removed.
    """
    excess = len(forest.trees) - forest.capacity
    if excess <= 0:
        return []
    scores = retain_scores(forest, weights, window)
    try:
        protected = forest.best_in_forest()[0]
    except NoViableCandidate:
        protected = None
    order = sorted(
        (t for t in forest.trees.values() if t.id != protected),
        key=lambda t: (scores[t.id], t.created_at, t.seq),
    )
    removed = [t.id for t in order[:excess]]
    for tid in removed:
        forest.remove_tree(tid)
    return removed
