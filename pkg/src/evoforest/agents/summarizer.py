"""Distillation of elite trajectories into retrievable pattern summaries."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

from evoforest.agents.backends import BackendError, CompletionBackend
from evoforest.features import SparseVector, combine, cosine
from evoforest.forest import Trajectory
from evoforest.sexpr import fmt_reward

logger = logging.getLogger(__name__)

SUMMARIZER_SYSTEM = (
    "ROLE: summarizer\n"
    "You distill optimization histories into reusable guidance. Describe the productive "
    "modification sequences, constraint-aware strategies and failure patterns you see, "
    "in at most three sentences."
)

DUPLICATE_COSINE = 0.95


@dataclass
class Summary:
    text: str
    frequency: int
    mean_gain: float
    variance: float
    feature_vector: SparseVector = field(default_factory=dict)
    sources: tuple[str, ...] = ()
    seq: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["sources"] = list(self.sources)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Summary:
        data = dict(data)
        data["sources"] = tuple(data.get("sources", ()))
        return cls(**data)


def pattern_stats(trajectories: Sequence[Trajectory]) -> tuple[int, float, float]:
    """(frequency, mean gain, population variance) over all non-root steps."""
    deltas = [d for t in trajectories for d in t.deltas]
    if not deltas:
        return 0, 0.0, 0.0
    mean = math.fsum(deltas) / len(deltas)
    var = math.fsum((d - mean) ** 2 for d in deltas) / len(deltas)
    return len(deltas), mean, var


def render_summarizer_prompt(trajectories: Sequence[Trajectory]) -> str:
    lines = ["# Elite trajectories"]
    for t in trajectories:
        lines.append(f"## {t.tree_id}/{t.node_id} final={fmt_reward(t.final_reward)}")
        for s in t.steps:
            lines.append(f"- {s.modification_summary} (dr={fmt_reward(s.delta_reward)})")
    return "\n".join(lines) + "\n"


class SummaryStore:
    """Capped, deduplicated store of summaries with cosine retrieval."""

    def __init__(self, cap: int = 32, duplicate_cosine: float = DUPLICATE_COSINE) -> None:
        self.cap = cap
        self.duplicate_cosine = duplicate_cosine
        self.items: list[Summary] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self.items)

    def merge(self, summary: Summary) -> bool:
        """Add ``summary``; returns False if it was dropped.

        A near-duplicate (cosine above the threshold) keeps whichever of the two
        has the higher mean gain. Past the cap the lowest-gain entry goes.
        """
        summary.seq = self._seq
        self._seq += 1
        for i, existing in enumerate(self.items):
            if cosine(existing.feature_vector, summary.feature_vector) > self.duplicate_cosine:
                if summary.mean_gain > existing.mean_gain:
                    self.items[i] = summary
                    return True
                return False
        self.items.append(summary)
        if len(self.items) > self.cap:
            victim = min(self.items, key=lambda s: (s.mean_gain, -s.seq))
            self.items.remove(victim)
            return victim is not summary
        return True

    def retrieve(self, query: SparseVector, count: int) -> list[Summary]:
        ranked = sorted(self.items, key=lambda s: (-cosine(query, s.feature_vector), -s.mean_gain, s.seq))
        return ranked[: max(0, count)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "cap": self.cap,
            "duplicate_cosine": self.duplicate_cosine,
            "seq": self._seq,
            "items": [s.to_dict() for s in self.items],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SummaryStore:
        store = cls(cap=data["cap"], duplicate_cosine=data["duplicate_cosine"])
        store._seq = data["seq"]
        store.items = [Summary.from_dict(s) for s in data["items"]]
        return store


def summarize(
    trajectories: Sequence[Trajectory],
    backend: CompletionBackend,
    store: SummaryStore | None = None,
) -> list[Summary]:
    """Distill ``trajectories`` into one summary and merge it into ``store``.

    The backend writes the pattern text; the statistics are computed locally.
    A backend failure skips the cycle and leaves the store untouched.
    """
    if not trajectories:
        raise ValueError("summarize needs at least one trajectory")
    try:
        text = backend.complete(SUMMARIZER_SYSTEM, render_summarizer_prompt(trajectories)).strip()
    except BackendError as exc:
        logger.warning("summarizer skipped: %s", exc)
        return []
    if not text:
        return []
    frequency, mean, var = pattern_stats(trajectories)
    summary = Summary(
        text=text,
        frequency=frequency,
        mean_gain=mean,
        variance=var,
        feature_vector=combine(s for t in trajectories for s in t.summaries),
        sources=tuple(f"{t.tree_id}/{t.node_id}" for t in trajectories),
    )
    if store is not None:
        store.merge(summary)
    return [summary]


def retrieve_summaries(store: SummaryStore, query: SparseVector, count: int) -> list[Summary]:
    return store.retrieve(query, count)
