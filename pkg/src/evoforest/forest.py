"""Phylogenetic forest: trees of candidate programs linked by single modifications."""

from __future__ import annotations

import enum
from collections import deque
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Any

from evoforest.executor import FAILED_REWARD, EvalResult
from evoforest.features import modification_key


class Status(str, enum.Enum):
    SUCCESS = "success"
    FAILED = "failed"
    PRUNED = "pruned"


class Origin(str, enum.Enum):
    SEED = "seed"
    REDESIGN = "redesign"


class ForestError(Exception):
    pass


class UnknownNodeError(ForestError, KeyError):
    pass


class UnknownTreeError(ForestError, KeyError):
    pass


class ParentPrunedError(ForestError):
    """The sampled parent was tombstoned; the caller should resample."""


class NoViableCandidate(ForestError):
    pass


@dataclass
class AlgorithmNode:
    id: str
    parent_id: str | None
    code: str
    modification_summary: str
    reward: float
    delta_reward: float = 0.0
    status: Status = Status.SUCCESS
    reason: str = ""
    modification_key: str = ""
    detailed_spec: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    depth: int = 0
    constraint_ok: bool = True
    created_at: int = 0  # orchestration epoch
    seq: int = 0  # forest-wide creation order, breaks created_at ties
    retained: bool = False  # kept as an informative failure by hopeless pruning
    pruned_at: int | None = None

    @property
    def is_root(self) -> bool:
        return self.parent_id is None

    @property
    def sampleable(self) -> bool:
        return self.status == Status.SUCCESS

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AlgorithmNode:
        data = dict(data)
        data["status"] = Status(data["status"])
        return cls(**data)


@dataclass(frozen=True)
class TrajectoryStep:
    node_id: str
    modification_summary: str
    delta_reward: float


@dataclass(frozen=True)
class Trajectory:
    """Root-to-node path. The first step is the root (its delta is 0 by convention)."""

    tree_id: str
    steps: tuple[TrajectoryStep, ...]
    final_reward: float

    @property
    def node_id(self) -> str:
        return self.steps[-1].node_id

    @property
    def deltas(self) -> list[float]:
        return [s.delta_reward for s in self.steps[1:]]

    @property
    def summaries(self) -> list[str]:
        return [s.modification_summary for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tree_id": self.tree_id,
            "steps": [[s.node_id, s.modification_summary, s.delta_reward] for s in self.steps],
            "final_reward": self.final_reward,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        steps = tuple(TrajectoryStep(*s) for s in data["steps"])
        return cls(data["tree_id"], steps, data["final_reward"])


@dataclass
class PhyloTree:
    id: str
    root_id: str
    nodes: dict[str, AlgorithmNode] = field(default_factory=dict)
    children: dict[str, list[str]] = field(default_factory=dict)
    label: str = ""
    origin: Origin = Origin.SEED
    created_at: int = 0
    seq: int = 0

    def node(self, node_id: str) -> AlgorithmNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"node {node_id!r} not in tree {self.id!r}") from None

    @property
    def root(self) -> AlgorithmNode:
        return self.nodes[self.root_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[AlgorithmNode]:
        """Nodes in creation order."""
        return iter(sorted(self.nodes.values(), key=lambda n: n.seq))

    def parent(self, node_id: str) -> AlgorithmNode | None:
        pid = self.node(node_id).parent_id
        return None if pid is None else self.nodes[pid]

    def walk(self, start: str | None = None) -> Iterator[AlgorithmNode]:
        """Preorder traversal, children in creation order."""
        stack = [start or self.root_id]
        while stack:
            nid = stack.pop()
            yield self.nodes[nid]
            stack.extend(reversed(self.children.get(nid, [])))

    def subtree_ids(self, node_id: str) -> list[str]:
        return [n.id for n in self.walk(node_id)]

    def path(self, node_id: str) -> list[AlgorithmNode]:
        node = self.node(node_id)
        out = [node]
        while node.parent_id is not None:
            node = self.nodes[node.parent_id]
            out.append(node)
        out.reverse()
        return out

    def trajectory(self, node_id: str) -> Trajectory:
        steps = tuple(TrajectoryStep(n.id, n.modification_summary, n.delta_reward) for n in self.path(node_id))
        return Trajectory(self.id, steps, self.nodes[node_id].reward)

    def siblings(self, node_id: str) -> list[AlgorithmNode]:
        node = self.node(node_id)
        if node.parent_id is None:
            return []
        return [self.nodes[c] for c in self.children[node.parent_id] if c != node_id]

    def success_nodes(self) -> list[AlgorithmNode]:
        return [n for n in self if n.status == Status.SUCCESS]

    def best_node(self) -> str:
        """Highest-reward Success node; ties go to the earliest created."""
        live = self.success_nodes()
        if not live:
            raise NoViableCandidate(f"tree {self.id!r} has no successful node")
        return max(live, key=lambda n: (n.reward, -n.created_at, -n.seq)).id

    def best_reward(self) -> float | None:
        live = self.success_nodes()
        return max(n.reward for n in live) if live else None

    def validate(self) -> None:
        """Raise ForestError if structural invariants are broken."""
        if self.root_id not in self.nodes:
            raise ForestError("root missing")
        seen: set[str] = set()
        queue = deque([(self.root_id, 0)])
        while queue:
            nid, depth = queue.popleft()
            if nid in seen:
                raise ForestError(f"cycle or shared child at {nid}")
            seen.add(nid)
            node = self.nodes.get(nid)
            if node is None:
                raise ForestError(f"dangling child id {nid}")
            if node.depth != depth:
                raise ForestError(f"node {nid} depth {node.depth} != {depth}")
            for c in self.children.get(nid, []):
                if self.nodes[c].parent_id != nid:
                    raise ForestError(f"child {c} does not point back to {nid}")
                queue.append((c, depth + 1))
        if seen != set(self.nodes):
            raise ForestError(f"unreachable nodes: {sorted(set(self.nodes) - seen)}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "root_id": self.root_id,
            "label": self.label,
            "origin": self.origin.value,
            "created_at": self.created_at,
            "seq": self.seq,
            "nodes": [n.to_dict() for n in self],
            "children": {k: list(v) for k, v in self.children.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PhyloTree:
        nodes = [AlgorithmNode.from_dict(n) for n in data["nodes"]]
        return cls(
            id=data["id"],
            root_id=data["root_id"],
            nodes={n.id: n for n in nodes},
            children={k: list(v) for k, v in data["children"].items()},
            label=data.get("label", ""),
            origin=Origin(data.get("origin", "seed")),
            created_at=data.get("created_at", 0),
            seq=data.get("seq", 0),
        )


class Forest:
    """Set of lineage trees with a capacity; the single writer owns mutation.

    Node ids are ``n<k>`` and tree ids ``t<k>`` from per-forest counters, so
    a fixed run always produces the same identifiers.
    """

    def __init__(self, capacity: int = 8, sentinel: float = FAILED_REWARD) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.trees: dict[str, PhyloTree] = {}
        self.capacity = capacity
        self.sentinel = sentinel
        self.epoch = 0
        self._next_node = 0
        self._next_tree = 0

    def __len__(self) -> int:
        return len(self.trees)

    def tree(self, tree_id: str) -> PhyloTree:
        try:
            return self.trees[tree_id]
        except KeyError:
            raise UnknownTreeError(f"no tree {tree_id!r}") from None

    def _new_node_id(self) -> tuple[str, int]:
        k = self._next_node
        self._next_node += 1
        return f"n{k}", k

    def create_tree(
        self,
        seed_code: str,
        result: EvalResult,
        origin: Origin = Origin.SEED,
        *,
        tree_id: str | None = None,
        label: str = "",
        summary: str = "seed",
    ) -> str:
        if tree_id is None:
            tree_id = f"t{self._next_tree}"
        if tree_id in self.trees:
            raise ForestError(f"duplicate tree id {tree_id!r}")
        self._next_tree += 1
        nid, seq = self._new_node_id()
        root = AlgorithmNode(
            id=nid,
            parent_id=None,
            code=seed_code,
            modification_summary=summary,
            modification_key=modification_key(summary),
            reward=result.score if result.ok else self.sentinel,
            delta_reward=0.0,
            status=Status.SUCCESS if result.ok else Status.FAILED,
            reason="" if result.ok else (result.reason or ""),
            metrics=_metrics_of(result),
            constraint_ok=result.constraint_ok,
            created_at=self.epoch,
            seq=seq,
        )
        self.trees[tree_id] = PhyloTree(
            id=tree_id,
            root_id=nid,
            nodes={nid: root},
            children={nid: []},
            label=label or tree_id,
            origin=Origin(origin),
            created_at=self.epoch,
            seq=seq,
        )
        return tree_id

    def add_child(
        self,
        tree_id: str,
        parent_id: str,
        code: str,
        summary: str,
        result: EvalResult,
        *,
        detailed_spec: str = "",
        reject_reason: str | None = None,
        metrics: dict[str, float] | None = None,
    ) -> str:
        """Append a child under ``parent_id``.

        A failed evaluation, or a ``reject_reason`` from the caller (for
        instance a non-improving edit), records the child as Failed with the
        sentinel reward. The observed score is still kept in ``metrics``.
        """
        tree = self.tree(tree_id)
        parent = tree.node(parent_id)
        if parent.status == Status.PRUNED:
            raise ParentPrunedError(f"parent {parent_id} is pruned")
        ok = result.ok and reject_reason is None
        reward = result.score if ok else self.sentinel
        nid, seq = self._new_node_id()
        node_metrics = _metrics_of(result)
        if metrics:
            node_metrics.update(metrics)
        tree.nodes[nid] = AlgorithmNode(
            id=nid,
            parent_id=parent_id,
            code=code,
            modification_summary=summary,
            modification_key=modification_key(summary),
            detailed_spec=detailed_spec,
            reward=reward,
            delta_reward=reward - parent.reward,
            status=Status.SUCCESS if ok else Status.FAILED,
            reason="" if ok else (reject_reason or result.reason or ""),
            metrics=node_metrics,
            depth=parent.depth + 1,
            constraint_ok=result.constraint_ok,
            created_at=self.epoch,
            seq=seq,
        )
        tree.children[parent_id].append(nid)
        tree.children[nid] = []
        return nid

    def locate(self, node_id: str) -> str:
        for tid, tree in self.trees.items():
            if node_id in tree.nodes:
                return tid
        raise UnknownNodeError(node_id)

    def best_in_forest(self) -> tuple[str, str]:
        best: tuple[float, int, int] | None = None
        out: tuple[str, str] | None = None
        for tid, tree in self.trees.items():
            for n in tree.success_nodes():
                key = (n.reward, -n.created_at, -n.seq)
                if best is None or key > best:
                    best, out = key, (tid, n.id)
        if out is None:
            raise NoViableCandidate("no successful candidate in the forest")
        return out

    def best_reward(self) -> float | None:
        try:
            tid, nid = self.best_in_forest()
        except NoViableCandidate:
            return None
        return self.trees[tid].nodes[nid].reward

    def remove_tree(self, tree_id: str) -> PhyloTree:
        return self.trees.pop(self.tree(tree_id).id)

    def compact(self, horizon: int) -> int:
        """Physically drop fully-pruned subtrees tombstoned at least ``horizon`` epochs ago."""
        removed = 0
        for tree in self.trees.values():
            for nid in list(tree.children):
                node = tree.nodes.get(nid)
                if node is None or node.is_root or node.status != Status.PRUNED:
                    continue
                parent = tree.nodes.get(node.parent_id)
                if parent is None or parent.status == Status.PRUNED:
                    continue  # only act on maximal pruned subtrees
                sub = tree.subtree_ids(nid)
                if all(
                    tree.nodes[s].status == Status.PRUNED
                    and tree.nodes[s].pruned_at is not None
                    and self.epoch - tree.nodes[s].pruned_at >= horizon
                    for s in sub
                ):
                    tree.children[node.parent_id].remove(nid)
                    for s in sub:
                        del tree.nodes[s]
                        del tree.children[s]
                    removed += len(sub)
        return removed

    def to_dict(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity,
            "sentinel": self.sentinel,
            "epoch": self.epoch,
            "next_node": self._next_node,
            "next_tree": self._next_tree,
            "trees": [t.to_dict() for t in self.trees.values()],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Forest:
        forest = cls(capacity=data["capacity"], sentinel=data["sentinel"])
        forest.epoch = data["epoch"]
        forest._next_node = data["next_node"]
        forest._next_tree = data["next_tree"]
        for t in data["trees"]:
            tree = PhyloTree.from_dict(t)
            forest.trees[tree.id] = tree
        return forest


def _metrics_of(result: EvalResult) -> dict[str, float]:
    m = {"runtime_ms": float(result.runtime_ms), "constraint_ok": 1.0 if result.constraint_ok else 0.0}
    if result.score is not None:
        m["score"] = float(result.score)
    return m
