"""Cross-lineage memory: top-k elite trajectories and scored elite modifications."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from evoforest.features import Featurizer, SparseVector, combine, cosine, term_vector
from evoforest.forest import Status, Trajectory

SIMILARITY_FLOOR = 1e-6


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def value(mean_gain: float, variance: float, count: int) -> float:
    """Modification value: mean gain scaled into (0.5, 1) by consistency and confidence.

    ``mean_gain * (0.5 + 0.5 * sigmoid(log(1 + count) - variance))``
    """
    return mean_gain * (0.5 + 0.5 * sigmoid(-variance + math.log1p(count)))


@dataclass
class EliteModificationStats:
    key: str
    mean_gain: float = 0.0
    m2: float = 0.0  # running sum of squared deviations
    count: int = 0
    value: float = 0.0

    @property
    def variance(self) -> float:
        """Population variance of the observed gains."""
        return self.m2 / self.count if self.count else 0.0

    def update(self, delta: float) -> None:
        self.count += 1
        diff = delta - self.mean_gain
        self.mean_gain += diff / self.count
        self.m2 += diff * (delta - self.mean_gain)
        self.value = value(self.mean_gain, self.variance, self.count)

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "mean_gain": self.mean_gain, "m2": self.m2, "count": self.count, "value": self.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EliteModificationStats:
        return cls(**data)


@dataclass
class EliteTrajectory:
    trajectory: Trajectory
    source_tree: str
    admitted_epoch: int
    feature_vector: SparseVector
    final_code: str = ""
    admitted_seq: int = 0

    @property
    def final_reward(self) -> float:
        return self.trajectory.final_reward

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory": self.trajectory.to_dict(),
            "source_tree": self.source_tree,
            "admitted_epoch": self.admitted_epoch,
            "feature_vector": self.feature_vector,
            "final_code": self.final_code,
            "admitted_seq": self.admitted_seq,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EliteTrajectory:
        data = dict(data)
        data["trajectory"] = Trajectory.from_dict(data["trajectory"])
        return cls(**data)


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str = ""
    evicted: EliteTrajectory | None = None

    def __bool__(self) -> bool:
        return self.admitted


def trajectory_features(traj: Trajectory, featurizer: Featurizer = term_vector) -> SparseVector:
    if featurizer is term_vector:
        return combine(traj.summaries)
    return featurizer("\n".join(traj.summaries))


@dataclass
class ElitePool:
    """Top-``k`` trajectories by final reward plus a modification catalog.

    Trajectories are kept sorted best-first; equal rewards keep admission
    order, so a newcomer that only ties the current k-th best is rejected.
    """

    k: int = 16
    max_modifications: int | None = None
    featurizer: Featurizer = field(default=term_vector, repr=False)
    trajectories: list[EliteTrajectory] = field(default_factory=list)
    modifications: dict[str, EliteModificationStats] = field(default_factory=dict)
    _seq: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be positive")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def full(self) -> bool:
        return len(self.trajectories) >= self.k

    def best(self) -> EliteTrajectory | None:
        return self.trajectories[0] if self.trajectories else None

    def maybe_admit_trajectory(
        self,
        traj: Trajectory,
        *,
        terminal_status: Status = Status.SUCCESS,
        epoch: int = 0,
        code: str = "",
    ) -> Admission:
        if terminal_status != Status.SUCCESS:
            return Admission(False, f"trajectory ends at a {terminal_status.value} node")
        for e in self.trajectories:
            if e.trajectory.tree_id == traj.tree_id and e.trajectory.node_id == traj.node_id:
                return Admission(False, "already in pool")
        if self.full and not traj.final_reward > self.trajectories[-1].final_reward:
            return Admission(False, "below the current k-th best")
        elite = EliteTrajectory(
            trajectory=traj,
            source_tree=traj.tree_id,
            admitted_epoch=epoch,
            feature_vector=trajectory_features(traj, self.featurizer),
            final_code=code,
            admitted_seq=self._seq,
        )
        self._seq += 1
        evicted = self.trajectories.pop() if self.full else None
        pos = len(self.trajectories)
        for i, e in enumerate(self.trajectories):
            if traj.final_reward > e.final_reward:
                pos = i
                break
        self.trajectories.insert(pos, elite)
        return Admission(True, "admitted", evicted)

    def record_modification(self, key: str, delta_reward: float) -> EliteModificationStats:
        if not key:
            raise ValueError("modification key must be non-empty")
        stats = self.modifications.get(key)
        if stats is None:
            stats = self.modifications[key] = EliteModificationStats(key)
        stats.update(delta_reward)
        if self.max_modifications is not None and len(self.modifications) > self.max_modifications:
            victim = self._ranked([s for s in self.modifications.values() if s.key != key])[-1]
            del self.modifications[victim.key]
        return stats

    @staticmethod
    def _ranked(stats: list[EliteModificationStats]) -> list[EliteModificationStats]:
        return sorted(stats, key=lambda s: (-s.value, -s.count, s.key))

    def top_modifications(self, count: int) -> list[EliteModificationStats]:
        return self._ranked(list(self.modifications.values()))[: max(0, count)]

    def similarities(self, query: SparseVector) -> list[float]:
        return [cosine(query, e.feature_vector) for e in self.trajectories]

    def sample_trajectories(
        self, query: SparseVector, count: int, rng: np.random.Generator
    ) -> list[EliteTrajectory]:
        """Draw up to ``count`` elites without replacement, weight ``max(cos, 1e-6)``."""
        pool = list(self.trajectories)
        weights = [max(s, SIMILARITY_FLOOR) for s in self.similarities(query)]
        out: list[EliteTrajectory] = []
        while pool and len(out) < count:
            if len(pool) == 1:
                idx = 0
            else:
                w = np.asarray(weights)
                cdf = np.cumsum(w / w.sum())
                idx = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(pool) - 1)
            out.append(pool.pop(idx))
            weights.pop(idx)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "max_modifications": self.max_modifications,
            "seq": self._seq,
            "trajectories": [e.to_dict() for e in self.trajectories],
            "modifications": [s.to_dict() for s in self.modifications.values()],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], featurizer: Featurizer = term_vector) -> ElitePool:
        pool = cls(k=data["k"], max_modifications=data.get("max_modifications"), featurizer=featurizer)
        pool._seq = data["seq"]
        pool.trajectories = [EliteTrajectory.from_dict(e) for e in data["trajectories"]]
        pool.modifications = {
            s["key"]: EliteModificationStats.from_dict(s) for s in data["modifications"]
        }
        return pool
