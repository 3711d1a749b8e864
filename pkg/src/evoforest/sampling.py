"""Boltzmann selection of the next tree and node to expand."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from evoforest.features import SparseVector, combine, cosine
from evoforest.forest import Forest, PhyloTree, Status


class NoSampleableNode(LookupError):
    pass


class NoViableTree(LookupError):
    pass


@dataclass(frozen=True)
class SamplingParams:
    """Node-selection weights on reward, recent gain and inverse depth."""

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.25
    temperature: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "temperature"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class TreeScoreWeights:
    w1: float = 0.5  # performance
    w2: float = 0.3  # potential
    w3: float = 0.2  # diversity
    window: int = 5

    def __post_init__(self) -> None:
        for name in ("w1", "w2", "w3"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def softmax(scores: Iterable[float], temperature: float) -> np.ndarray:
    s = np.asarray(list(scores), dtype=float) / temperature
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def node_scores(tree: PhyloTree, params: SamplingParams) -> dict[str, float]:
    return {
        n.id: params.alpha * n.reward + params.beta * n.delta_reward + params.gamma / (n.depth + 1)
        for n in tree
        if n.sampleable
    }


def node_probabilities(tree: PhyloTree, params: SamplingParams) -> dict[str, float]:
    """Selection distribution over the tree's Success nodes.

    Depth enters as ``1 / (depth + 1)`` so the root gets the largest bonus.
    """
    scores = node_scores(tree, params)
    if not scores:
        raise NoSampleableNode(f"tree {tree.id!r} has no sampleable node")
    probs = softmax(scores.values(), params.temperature)
    return dict(zip(scores, probs.tolist()))


def draw(probs: Mapping[str, float], rng: np.random.Generator) -> str:
    keys = list(probs)
    if len(keys) == 1:
        return keys[0]
    cdf = np.cumsum(np.fromiter(probs.values(), dtype=float))
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return keys[min(idx, len(keys) - 1)]


def sample_node(tree: PhyloTree, params: SamplingParams, rng: np.random.Generator) -> str:
    return draw(node_probabilities(tree, params), rng)


def tree_features(tree: PhyloTree) -> SparseVector:
    texts: list[str] = []
    for n in tree.success_nodes():
        texts.append(n.modification_summary)
        texts.append(n.code)
    return combine(texts)


def potential(tree: PhyloTree, window: int) -> float:
    """Mean gain over the last ``window`` successful additions (0 if none)."""
    recent = [n for n in tree if n.status == Status.SUCCESS and not n.is_root][-window:]
    if not recent:
        return 0.0
    return math.fsum(n.delta_reward for n in recent) / len(recent)


def diversity(tree: PhyloTree, forest: Forest, features: Mapping[str, SparseVector] | None = None) -> float:
    """``1 - max cosine`` against every other tree; 1 when the tree is alone."""
    others = [t for t in forest.trees if t != tree.id]
    if not others:
        return 1.0
    feats = features if features is not None else {t: tree_features(forest.trees[t]) for t in forest.trees}
    mine = feats[tree.id] if tree.id in feats else tree_features(tree)
    return 1.0 - max(cosine(mine, feats[t]) for t in others)


def mean_diversity(forest: Forest) -> float:
    if not forest.trees:
        return 1.0
    feats = {t: tree_features(tree) for t, tree in forest.trees.items()}
    return math.fsum(diversity(t, forest, feats) for t in forest.trees.values()) / len(forest.trees)


def tree_score(
    tree: PhyloTree,
    forest: Forest,
    weights: TreeScoreWeights,
    features: Mapping[str, SparseVector] | None = None,
) -> float:
    best = tree.best_reward()
    perf = forest.sentinel if best is None else best
    return (
        weights.w1 * perf
        + weights.w2 * potential(tree, weights.window)
        + weights.w3 * diversity(tree, forest, features)
    )


def tree_probabilities(
    forest: Forest,
    weights: TreeScoreWeights,
    params: SamplingParams,
    exclude: Iterable[str] = (),
) -> dict[str, float]:
    skip = set(exclude)
    viable = [t for tid, t in forest.trees.items() if tid not in skip and any(n.sampleable for n in t)]
    if not viable:
        raise NoViableTree("no tree has a sampleable node")
    feats = {t: tree_features(tree) for t, tree in forest.trees.items()}
    scores = [tree_score(t, forest, weights, feats) for t in viable]
    return dict(zip((t.id for t in viable), softmax(scores, params.temperature).tolist()))


def sample_tree(
    forest: Forest,
    weights: TreeScoreWeights,
    params: SamplingParams,
    rng: np.random.Generator,
    exclude: Iterable[str] = (),
) -> str:
    return draw(tree_probabilities(forest, weights, params, exclude), rng)
