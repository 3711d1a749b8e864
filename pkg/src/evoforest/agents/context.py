"""Prompt context for the next-step policy: target, state, history and exemplars."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from evoforest.elite_pool import EliteModificationStats, ElitePool, EliteTrajectory, trajectory_features
from evoforest.features import SparseVector, cosine
from evoforest.forest import AlgorithmNode, Forest, PhyloTree, Status, Trajectory
from evoforest.sexpr import fmt_reward

if TYPE_CHECKING:
    from evoforest.agents.summarizer import Summary, SummaryStore

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
KEEP_TAIL_STEPS = 3


class Mode(str, enum.Enum):
    WARMUP = "warmup"
    EXPLORE = "explore"
    EXPLOIT = "exploit"


MODE_GUIDANCE = {
    Mode.WARMUP: "Propose a conservative, low-risk micro-edit such as a parameter adjustment "
    "or a localized refinement. Stay close to the current trajectory.",
    Mode.EXPLORE: "Propose a modification that diverges from previously explored paths. "
    "Larger steps are allowed; state why the idea is new and how to validate it.",
    Mode.EXPLOIT: "Propose a small, verifiable refinement around proven patterns, "
    "reusing high-value elite modifications where they apply.",
}


def count_tokens(text: str) -> int:
    """Approximate token count: words and individual punctuation marks."""
    return len(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class Target:
    objective: str = "score"
    direction: str = "maximize"
    constraints: tuple[str, ...] = ()
    description: str = ""


@dataclass(frozen=True)
class SiblingEntry:
    node_id: str
    summary: str
    delta_reward: float
    status: str
    reason: str = ""
    score: float | None = None


@dataclass(frozen=True)
class ContextSizes:
    trajectories: int = 4
    modifications: int = 4
    summaries: int = 3


@dataclass(frozen=True)
class Context:
    target: Target
    node: AlgorithmNode
    tree_id: str
    trajectory: Trajectory
    mode: Mode
    epoch: int = 0
    total_epochs: int = 0
    sibling_digest: tuple[SiblingEntry, ...] = ()
    elite_trajectories: tuple[EliteTrajectory, ...] = ()
    elite_modifications: tuple[EliteModificationStats, ...] = ()
    summaries: tuple[Summary, ...] = ()
    query: SparseVector = field(default_factory=dict)
    elided_steps: int = 0

    @property
    def remaining_epochs(self) -> int:
        return max(0, self.total_epochs - self.epoch)


def _digest(tree: PhyloTree, node_id: str) -> tuple[SiblingEntry, ...]:
    out = []
    for s in tree.siblings(node_id):
        out.append(
            SiblingEntry(
                node_id=s.id,
                summary=s.modification_summary,
                delta_reward=s.delta_reward,
                status=s.status.value,
                reason=s.reason,
                score=s.metrics.get("score"),
            )
        )
    return tuple(out)


def _diverse(candidates: list[EliteTrajectory], count: int) -> list[EliteTrajectory]:
    """Greedy max-min dissimilarity selection, seeded with the first candidate."""
    if not candidates:
        return []
    chosen = [candidates[0]]
    rest = candidates[1:]
    while rest and len(chosen) < count:
        best_i, best_d = 0, -1.0
        for i, c in enumerate(rest):
            d = min(1.0 - cosine(c.feature_vector, s.feature_vector) for s in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(rest.pop(best_i))
    return chosen


def build_context(
    node: AlgorithmNode,
    tree: PhyloTree,
    forest: Forest,
    pool: ElitePool,
    summaries: SummaryStore | None,
    mode: Mode,
    target: Target,
    rng: np.random.Generator,
    *,
    epoch: int = 0,
    total_epochs: int = 0,
    sizes: ContextSizes = ContextSizes(),
    token_budget: int | None = None,
) -> Context:
    """Assemble the policy context around ``node``.

    Warmup keeps a single item in each elite section. Explore selects elite
    trajectories for mutual dissimilarity. Exploit doubles the modification
    list and halves the trajectory list.
    """
    if node.status != Status.SUCCESS:
        raise ValueError(f"context requires a Success node, {node.id} is {node.status.value}")
    traj = tree.trajectory(node.id)
    query = trajectory_features(traj, pool.featurizer)

    n_traj, n_mods = sizes.trajectories, sizes.modifications
    if mode == Mode.WARMUP:
        n_traj, n_mods = min(1, n_traj), min(1, n_mods)
    elif mode == Mode.EXPLOIT:
        n_traj, n_mods = n_traj // 2, n_mods * 2

    if mode == Mode.EXPLORE:
        pool_size = min(len(pool), 2 * n_traj)
        elites = _diverse(pool.sample_trajectories(query, pool_size, rng), n_traj)
    else:
        elites = pool.sample_trajectories(query, n_traj, rng)

    retrieved = summaries.retrieve(query, sizes.summaries) if summaries is not None else []
    ctx = Context(
        target=target,
        node=node,
        tree_id=tree.id,
        trajectory=traj,
        mode=mode,
        epoch=epoch,
        total_epochs=total_epochs,
        sibling_digest=_digest(tree, node.id),
        elite_trajectories=tuple(elites),
        elite_modifications=tuple(pool.top_modifications(n_mods)),
        summaries=tuple(retrieved),
        query=query,
    )
    if token_budget is not None:
        ctx = fit_to_budget(ctx, token_budget)
    return ctx


def fit_to_budget(ctx: Context, budget: int) -> Context:
    """Shrink optional sections until the rendered prompt fits ``budget`` tokens.

    Order: summaries, elite trajectories (least similar first), elite
    modifications, sibling digest, then middle trajectory steps. Target and
    current state are never cut.
    """
    def fits(c: Context) -> bool:
        return count_tokens(render_prompt(c)) <= budget

    while not fits(ctx) and ctx.summaries:
        ctx = replace(ctx, summaries=ctx.summaries[:-1])
    while not fits(ctx) and ctx.elite_trajectories:
        sims = [cosine(ctx.query, e.feature_vector) for e in ctx.elite_trajectories]
        drop = min(range(len(sims)), key=lambda i: (sims[i], -i))
        ctx = replace(ctx, elite_trajectories=ctx.elite_trajectories[:drop] + ctx.elite_trajectories[drop + 1 :])
    while not fits(ctx) and ctx.elite_modifications:
        ctx = replace(ctx, elite_modifications=ctx.elite_modifications[:-1])
    while not fits(ctx) and ctx.sibling_digest:
        ctx = replace(ctx, sibling_digest=ctx.sibling_digest[:-1])
    steps = ctx.trajectory.steps
    if not fits(ctx) and len(steps) > KEEP_TAIL_STEPS + 1:
        kept = (steps[0],) + steps[-KEEP_TAIL_STEPS:]
        ctx = replace(
            ctx,
            trajectory=Trajectory(ctx.trajectory.tree_id, kept, ctx.trajectory.final_reward),
            elided_steps=ctx.elided_steps + len(steps) - len(kept),
        )
    return ctx


def _signed(x: float) -> str:
    text = fmt_reward(x)
    return text if text.startswith("-") else "+" + text


def _render_steps(steps, elided_after_first: int = 0) -> list[str]:
    lines = []
    for i, s in enumerate(steps):
        lines.append(f"- {s.node_id}: {s.modification_summary} (dr={_signed(s.delta_reward)})")
        if i == 0 and elided_after_first:
            lines.append(f"- ... {elided_after_first} intermediate steps omitted ...")
    return lines


def render_prompt(ctx: Context) -> str:
    """Deterministic text rendering; runtime measurements are left out on purpose."""
    t = ctx.target
    out = [
        "# Target",
        f"objective: {t.objective} ({t.direction})",
    ]
    if t.description:
        out.append(f"task: {t.description}")
    if t.constraints:
        out.append("constraints:")
        out += [f"- {c}" for c in t.constraints]
    out += [
        "",
        "# Mode",
        f"mode: {ctx.mode.value}",
        MODE_GUIDANCE[ctx.mode],
        "",
        "# Budget",
        f"epoch {ctx.epoch} of {ctx.total_epochs}; {ctx.remaining_epochs} epochs remaining",
        "",
        "# Current state",
        f"node {ctx.node.id} in tree {ctx.tree_id}: reward={fmt_reward(ctx.node.reward)} depth={ctx.node.depth}",
    ]
    metrics = {k: v for k, v in sorted(ctx.node.metrics.items()) if k != "runtime_ms"}
    if metrics:
        out.append("metrics: " + ", ".join(f"{k}={v!r}" for k, v in metrics.items()))
    out += ["```", ctx.node.code.rstrip("\n"), "```", "", "# Trajectory (root first)"]
    out += _render_steps(ctx.trajectory.steps, ctx.elided_steps)
    if ctx.sibling_digest:
        out += ["", "# Sibling comparisons"]
        for s in ctx.sibling_digest:
            if s.status == Status.SUCCESS.value:
                out.append(f"- {s.summary} (dr={_signed(s.delta_reward)})")
            else:
                score = "" if s.score is None else f", score={fmt_reward(s.score)}"
                out.append(f"- {s.summary} ({s.status}: {s.reason}{score})")
    if ctx.elite_trajectories:
        out += ["", "# Elite trajectories"]
        for e in ctx.elite_trajectories:
            out.append(f"## {e.source_tree}/{e.trajectory.node_id} final={fmt_reward(e.final_reward)}")
            out += _render_steps(e.trajectory.steps)
    if ctx.elite_modifications:
        out += ["", "# Elite modifications (by value)"]
        for m in ctx.elite_modifications:
            out.append(
                f"- {m.key} (mean={fmt_reward(m.mean_gain)}, var={fmt_reward(m.variance)}, "
                f"n={m.count}, value={fmt_reward(m.value)})"
            )
    if ctx.summaries:
        out += ["", "# Distilled patterns"]
        for s in ctx.summaries:
            out.append(f"- {s.text} (mean_gain={fmt_reward(s.mean_gain)}, frequency={s.frequency})")
    return "\n".join(out) + "\n"


# -- mode selection --------------------------------------------------------


@dataclass(frozen=True)
class ModeThresholds:
    warmup_epochs: int = 10
    plateau: int = 8
    diversity: float = 0.2
    streak: int = 3
    value: float = 0.1


@dataclass(frozen=True)
class ModeSignals:
    epoch: int
    plateau: int = 0
    mean_diversity: float = 1.0
    recent_deltas: tuple[float, ...] = ()
    top_value: float | None = None
    previous: Mode = Mode.WARMUP


def select_mode(signals: ModeSignals, thresholds: ModeThresholds = ModeThresholds()) -> Mode:
    """Warmup first, then Explore on plateau or collapse, Exploit on a gain streak."""
    if signals.epoch < thresholds.warmup_epochs:
        return Mode.WARMUP
    if signals.plateau >= thresholds.plateau or signals.mean_diversity < thresholds.diversity:
        return Mode.EXPLORE
    recent = signals.recent_deltas[-thresholds.streak :] if thresholds.streak > 0 else ()
    if (
        len(recent) == thresholds.streak
        and all(d > 0 for d in recent)
        and signals.top_value is not None
        and signals.top_value >= thresholds.value
    ):
        return Mode.EXPLOIT
    return signals.previous
