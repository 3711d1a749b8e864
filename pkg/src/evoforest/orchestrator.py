"""The optimization loop: micro-loop edits, macro-loop redesigns, checkpoints.

Each epoch samples a tree and a node, builds the policy context, asks for
the next modification, implements and evaluates it, and commits the result
as a child (Success on improvement, Failed otherwise). The sampled tree is
then pruned. When search stalls a Designer redesign may seed a new tree.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np

from evoforest.agents import (
    AgentError,
    CompletionBackend,
    Context,
    HttpBackend,
    Mode,
    ModeSignals,
    ModeThresholds,
    ModifyOutcome,
    Proposal,
    ProposalFormatError,
    ScriptedBackend,
    SummaryStore,
    Target,
    build_context,
    design,
    modify,
    next_step,
    select_mode,
    summarize,
)
from evoforest.checkpoint import read_checkpoint, write_checkpoint
from evoforest.config import ROLES, ConfigError, RunConfig
from evoforest.elite_pool import ElitePool
from evoforest.executor import (
    ContainerConfig,
    EvalMode,
    EvalRequest,
    EvalResult,
    UnknownTaskError,
    evaluate,
    get_task,
    passes_gate,
)
from evoforest.forest import Forest, NoViableCandidate, Origin, Status
from evoforest.pruning import FOREST_CAPACITY, HOPELESS, LOW_POTENTIAL, prune_forest, prune_hopeless, prune_low_potential
from evoforest.sampling import NoViableTree, mean_diversity, sample_node, sample_tree
from evoforest.sexpr import fmt_reward, forest_to_sexpr, to_sexpr

logger = logging.getLogger(__name__)

Executor = Callable[[EvalRequest], EvalResult]

CHECKPOINT_FILE = "checkpoint.json"
EVENTS_FILE = "events.jsonl"
SEXPR_FILE = "forest.sexpr"
REPORT_FILE = "report.csv"
RECENT_DELTAS = 32


class RunAborted(RuntimeError):
    """The run stopped early; ``checkpoint`` holds resumable state when written."""

    def __init__(self, message: str, checkpoint: Path | None = None) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class RunResult:
    tree_id: str
    node_id: str
    code: str
    reward: float


@dataclass
class RunState:
    forest: Forest
    pool: ElitePool
    summaries: SummaryStore
    rng: np.random.Generator
    epoch: int = 0
    mode: Mode = Mode.WARMUP
    plateau: int = 0
    last_redesign: int | None = None
    recent_deltas: list[float] = field(default_factory=list)
    best_trace: list[float | None] = field(default_factory=list)
    tree_tasks: dict[str, str] = field(default_factory=dict)
    summarized_seq: int = 0
    backend_failures: int = 0
    events_written: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "forest": self.forest.to_dict(),
            "pool": self.pool.to_dict(),
            "summaries": self.summaries.to_dict(),
            "rng": self.rng.bit_generator.state,
            "epoch": self.epoch,
            "mode": self.mode.value,
            "plateau": self.plateau,
            "last_redesign": self.last_redesign,
            "recent_deltas": list(self.recent_deltas),
            "best_trace": list(self.best_trace),
            "tree_tasks": dict(self.tree_tasks),
            "summarized_seq": self.summarized_seq,
            "backend_failures": self.backend_failures,
            "events_written": self.events_written,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunState:
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = data["rng"]
        return cls(
            forest=Forest.from_dict(data["forest"]),
            pool=ElitePool.from_dict(data["pool"]),
            summaries=SummaryStore.from_dict(data["summaries"]),
            rng=rng,
            epoch=data["epoch"],
            mode=Mode(data["mode"]),
            plateau=data["plateau"],
            last_redesign=data["last_redesign"],
            recent_deltas=list(data["recent_deltas"]),
            best_trace=list(data["best_trace"]),
            tree_tasks=dict(data["tree_tasks"]),
            summarized_seq=data["summarized_seq"],
            backend_failures=data["backend_failures"],
            events_written=data["events_written"],
        )


def make_backend(spec: dict[str, Any], config: RunConfig) -> CompletionBackend:
    """Instantiate a completion backend from its configuration entry."""
    kind = spec["kind"]
    options = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "hill_climber":
        from evoforest.testbed import get_synthetic, scripted_hill_climber

        task = options.pop("task", None) or config.task or config.task_of(config.seeds[0])
        try:
            synthetic = get_synthetic(task)
        except KeyError:
            raise ConfigError("backends", f"hill_climber needs a builtin task, got {task!r}") from None
        return scripted_hill_climber(synthetic, **options)
    if kind == "replay":
        return ScriptedBackend.from_jsonl(options["path"])
    if kind == "http":
        return HttpBackend(options.pop("base_url"), options.pop("model"), **options)
    raise ConfigError("backends", f"unknown backend kind {kind!r}")


def build_backends(config: RunConfig) -> dict[str, CompletionBackend]:
    """One backend per role; roles with identical entries share an instance."""
    cache: dict[str, CompletionBackend] = {}
    out = {}
    for role in ROLES:
        spec = config.backend_for(role)
        key = json.dumps(spec, sort_keys=True)
        if key not in cache:
            cache[key] = make_backend(spec, config)
        out[role] = cache[key]
    return out


@dataclass
class _Pick:
    tree_id: str
    node_id: str
    context: Context


@dataclass
class _Act:
    proposal: Proposal | None = None
    outcome: ModifyOutcome | None = None
    error: str | None = None
    format_error: str | None = None


class Orchestrator:
    """Single writer over a :class:`RunState`; see the module docstring for the epoch flow."""

    def __init__(
        self,
        config: RunConfig,
        *,
        out_dir: str | os.PathLike | None = None,
        backends: dict[str, CompletionBackend] | None = None,
        executor: Executor | None = None,
        state: RunState | None = None,
    ) -> None:
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        for i, seed in enumerate(config.seeds):
            try:
                get_task(config.task_of(seed))
            except UnknownTaskError:
                raise ConfigError(f"seeds[{i}].task", f"unknown task {config.task_of(seed)!r}") from None
        self.backends = backends if backends is not None else build_backends(config)
        missing = [r for r in ROLES if r not in self.backends]
        if missing:
            raise ConfigError(f"backends.{missing[0]}", "no backend for this role")
        if executor is None:
            container = ContainerConfig(**config.container) if config.container else None
            executor = partial(evaluate, backend_kind=config.executor, container=container)
        self.executor = executor
        self.events: list[dict[str, Any]] = []
        self._thresholds = ModeThresholds(
            warmup_epochs=config.warmup_epochs,
            plateau=config.modes.plateau,
            diversity=config.modes.diversity,
            streak=config.modes.streak,
            value=config.modes.value,
        )
        self.state = state
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if state is not None:
                self._truncate_events(state.events_written)
        if self.state is None:
            self.state = self._initial_state()

    # -- events ------------------------------------------------------------

    @property
    def events_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / EVENTS_FILE

    def _truncate_events(self, keep: int) -> None:
        path = self.events_path
        if path is None or not path.exists():
            return
        lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
        if len(lines) != keep:
            path.write_text("".join(lines[:keep]), encoding="utf-8")

    def _emit(self, kind: str, tree: str | None = None, node: str | None = None, **payload: Any) -> None:
        record = {"epoch": self.state.epoch, "kind": kind, "tree": tree, "node": node, "payload": payload}
        self.events.append(record)
        self.state.events_written += 1
        if self.events_path is not None:
            with open(self.events_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    # -- setup ---------------------------------------------------------------

    def _evaluate(self, code: str, task_id: str) -> EvalResult:
        result = self.executor(EvalRequest(code, task_id, self.config.limits, EvalMode.DRY_RUN))
        if result.ok:
            result = self.executor(EvalRequest(code, task_id, self.config.limits, EvalMode.FULL))
        return result

    def _initial_state(self) -> RunState:
        cfg = self.config
        self.state = RunState(
            forest=Forest(capacity=cfg.forest_capacity),
            pool=ElitePool(k=cfg.elite_k),
            summaries=SummaryStore(),
            rng=np.random.Generator(np.random.PCG64(cfg.seed)),
        )
        if self.out_dir is not None:
            self._truncate_events(0)
        for seed in cfg.seeds:
            task_id = cfg.task_of(seed)
            code = seed.code
            if code is None:
                from evoforest.testbed import get_synthetic

                try:
                    code = get_synthetic(task_id).seed_code
                except KeyError:
                    raise ConfigError("seeds", f"task {task_id!r} has no builtin seed; give 'code'") from None
            result = self._evaluate(code, task_id)
            tid = self.state.forest.create_tree(code, result, Origin.SEED, label=seed.label or task_id)
            self.state.tree_tasks[tid] = task_id
            root = self.state.forest.tree(tid).root
            self._emit("seed", tid, root.id, task=task_id, status=root.status.value, score=result.score,
                       reason=result.reason)
        self.state.best_trace.append(self.state.forest.best_reward())
        return self.state

    # -- public API ----------------------------------------------------------

    def run(self, until: int | None = None) -> RunResult:
        """Advance to epoch ``until`` (default: the configured total) and return the best candidate."""
        stop = self.config.epochs if until is None else min(until, self.config.epochs)
        while self.state.epoch < stop:
            self.step()
        return self.best()

    def best(self) -> RunResult:
        try:
            tid, nid = self.state.forest.best_in_forest()
        except NoViableCandidate:
            raise RunAborted("no successful candidate in the forest") from None
        node = self.state.forest.tree(tid).node(nid)
        return RunResult(tid, nid, node.code, node.reward)

    def trigger_redesign(self) -> bool:
        """Plateau or diversity collapse, outside the cooldown, with a non-empty elite pool."""
        st, macro = self.state, self.config.macro
        if len(st.pool) == 0 or st.epoch <= self.config.warmup_epochs:
            return False
        since = st.epoch - (st.last_redesign if st.last_redesign is not None else 0)
        if since < macro.cooldown:
            return False
        return st.plateau >= macro.plateau or mean_diversity(st.forest) < macro.diversity

    # -- the epoch -------------------------------------------------------------

    def step(self) -> None:
        st, cfg = self.state, self.config
        st.epoch += 1
        st.forest.epoch = st.epoch
        st.mode = self._select_mode()
        picks = self._pick()
        acts = self._act_all(picks)
        best_before = st.forest.best_reward()
        outage = 0
        order = sorted(zip(picks, acts), key=lambda pa: st.forest.tree(pa[0].tree_id).seq)
        for pick, act in order:
            outage += self._commit(pick, act)
        if outage == len(picks):
            st.backend_failures += 1
        else:
            st.backend_failures = 0
        if st.backend_failures >= cfg.max_backend_failures:
            self._abort(f"backend unavailable for {st.backend_failures} consecutive epochs")

        best = st.forest.best_reward()
        improved = best is not None and (best_before is None or best > best_before)
        st.plateau = 0 if improved else st.plateau + 1

        interval = cfg.macro.summarize_interval
        if interval and st.epoch % interval == 0:
            self._summarize()
        if self.trigger_redesign():
            self._redesign()
        checkpoint_due = cfg.checkpoint_interval and st.epoch % cfg.checkpoint_interval == 0
        if checkpoint_due:
            dropped = st.forest.compact(cfg.pruning.compaction_horizon)
            if dropped:
                self._emit("compacted", removed=dropped)

        st.best_trace.append(st.forest.best_reward())
        self._emit(
            "epoch_end",
            best_reward=st.forest.best_reward(),
            mode=st.mode.value,
            plateau=st.plateau,
            trees=len(st.forest),
        )
        logger.info("epoch %d: mode=%s best=%s trees=%d", st.epoch, st.mode.value,
                    fmt_reward(st.forest.best_reward() or 0.0), len(st.forest))
        # last, so a restore resumes exactly at the next epoch boundary
        if checkpoint_due and self.out_dir is not None:
            self.checkpoint(self.out_dir / CHECKPOINT_FILE)

    def _select_mode(self) -> Mode:
        st = self.state
        top = st.pool.top_modifications(1)
        signals = ModeSignals(
            epoch=st.epoch - 1,
            plateau=st.plateau,
            mean_diversity=mean_diversity(st.forest),
            recent_deltas=tuple(st.recent_deltas),
            top_value=top[0].value if top else None,
            previous=st.mode,
        )
        return select_mode(signals, self._thresholds)

    def _viable(self) -> list[str]:
        trees = sorted(self.state.forest.trees.values(), key=lambda t: t.seq)
        return [t.id for t in trees if any(n.sampleable for n in t)]

    def _pick(self) -> list[_Pick]:
        st, cfg = self.state, self.config
        viable = self._viable()
        if not viable:
            self._abort("no tree has a sampleable node")
        width = min(cfg.islands, len(viable))
        chosen: list[str] = []
        for i in range(width):
            if st.epoch <= cfg.warmup_epochs:
                # first phase: round-robin over the seed frontier
                rest = [t for t in viable if t not in chosen]
                chosen.append(rest[((st.epoch - 1) * width + i) % len(rest)])
            else:
                try:
                    chosen.append(sample_tree(st.forest, cfg.tree_weights, cfg.sampling, st.rng, exclude=chosen))
                except NoViableTree:
                    break
        picks = []
        for tid in chosen:
            tree = st.forest.tree(tid)
            nid = sample_node(tree, cfg.sampling, st.rng)
            ctx = build_context(
                tree.node(nid), tree, st.forest, st.pool, st.summaries, st.mode, self._target(tid), st.rng,
                epoch=st.epoch, total_epochs=cfg.epochs, sizes=cfg.context, token_budget=cfg.token_budget,
            )
            picks.append(_Pick(tid, nid, ctx))
            self._emit("select", tid, nid, mode=st.mode.value)
        return picks

    def _target(self, tree_id: str) -> Target:
        task = get_task(self.state.tree_tasks[tree_id])
        return Target(task.objective, task.direction, tuple(task.constraints), task.description)

    def _act(self, pick: _Pick) -> _Act:
        try:
            proposal = next_step(pick.context, self.backends["next_stepper"])
        except AgentError as exc:
            return _Act(error=str(exc))
        except ProposalFormatError as exc:
            return _Act(format_error=f"{exc} ({exc.attempts} attempts)")
        outcome = modify(
            proposal,
            pick.context.node,
            self.backends["modify_agent"],
            self.executor,
            task_ref=self.state.tree_tasks[pick.tree_id],
            limits=self.config.limits,
        )
        if not outcome.result.ok and outcome.failures and all(f.startswith("backend error") for f in outcome.failures):
            return _Act(proposal=proposal, error=outcome.failures[-1])
        return _Act(proposal=proposal, outcome=outcome)

    def _act_all(self, picks: list[_Pick]) -> list[_Act]:
        if len(picks) <= 1:
            return [self._act(p) for p in picks]
        with ThreadPoolExecutor(max_workers=len(picks)) as ex:
            return list(ex.map(self._act, picks))

    def _commit(self, pick: _Pick, act: _Act) -> int:
        """Apply one island's outcome; returns 1 on a backend outage."""
        st, cfg = self.state, self.config
        tid, nid = pick.tree_id, pick.node_id
        if act.error is not None:
            self._emit("backend_error", tid, nid, message=act.error)
            return 1
        if act.format_error is not None:
            self._emit("proposal_rejected", tid, nid, reason=act.format_error)
            return 0
        proposal, outcome = act.proposal, act.outcome
        self._emit("proposal", tid, nid, summary=proposal.high_level, attempts=proposal.attempts)
        improved = outcome.result.ok and passes_gate(outcome.reward, outcome.delta_reward, cfg.gate)
        reject = None
        if outcome.result.ok and not improved:
            reject = f"no improvement (dr={fmt_reward(outcome.delta_reward)})"
        child = st.forest.add_child(
            tid, nid, outcome.code, proposal.high_level, outcome.result,
            detailed_spec=proposal.detailed_spec,
            reject_reason=reject,
            metrics={"debug_attempts": float(outcome.debug_attempts), "diff_ratio": round(outcome.diff_ratio, 9)},
        )
        tree = st.forest.tree(tid)
        node = tree.node(child)
        self._emit(
            "child", tid, child,
            parent=nid, status=node.status.value, reward=node.reward, delta=node.delta_reward,
            score=outcome.result.score, reason=node.reason, debug_attempts=outcome.debug_attempts,
        )
        st.recent_deltas = (st.recent_deltas + [node.delta_reward])[-RECENT_DELTAS:]
        if node.status == Status.SUCCESS:
            admission = st.pool.maybe_admit_trajectory(
                tree.trajectory(child), terminal_status=Status.SUCCESS, epoch=st.epoch, code=node.code
            )
            if admission:
                evicted = admission.evicted
                self._emit(
                    "elite_admitted", tid, child,
                    evicted=None if evicted is None else f"{evicted.source_tree}/{evicted.trajectory.node_id}",
                )
            st.pool.record_modification(node.modification_key, node.delta_reward)
        hopeless = prune_hopeless(tree, st.epoch)
        stale = prune_low_potential(tree, st.epoch, cfg.pruning.stagnation_rounds, cfg.pruning.percentile)
        if hopeless:
            self._emit("pruned", tid, None, reason=HOPELESS, nodes=hopeless)
        if stale:
            self._emit("pruned", tid, None, reason=LOW_POTENTIAL, nodes=stale)
        return 0

    def _summarize(self) -> None:
        st = self.state
        fresh = sorted(
            (e for e in st.pool.trajectories if e.admitted_seq >= st.summarized_seq), key=lambda e: e.admitted_seq
        )
        if not fresh:
            return
        made = summarize([e.trajectory for e in fresh], self.backends["summarizer"], st.summaries)
        st.summarized_seq = max(e.admitted_seq for e in fresh) + 1
        self._emit("summarized", sources=len(fresh), texts=[s.text for s in made], stored=len(st.summaries))

    def _redesign(self) -> None:
        st, cfg = self.state, self.config
        st.last_redesign = st.epoch
        elite = st.pool.best()
        anchor = elite.source_tree if elite.source_tree in st.forest.trees else st.forest.best_in_forest()[0]
        tree = st.forest.tree(anchor)
        node = tree.node(elite.trajectory.node_id) if elite.trajectory.node_id in tree.nodes else tree.root
        task_id = st.tree_tasks.get(elite.source_tree, st.tree_tasks[anchor])
        ctx = build_context(
            node, tree, st.forest, st.pool, st.summaries, Mode.EXPLORE, self._target(anchor), st.rng,
            epoch=st.epoch, total_epochs=cfg.epochs, sizes=cfg.context, token_budget=cfg.token_budget,
        )
        source = f"{elite.source_tree}/{elite.trajectory.node_id}"
        try:
            code = design(elite, ctx, self.backends["designer"])
        except (AgentError, ProposalFormatError) as exc:
            self._emit("redesign", None, None, elite=source, admitted=False, score=None, reason=str(exc))
            return
        result = self._evaluate(code, task_id)
        roots = [t.root.reward for t in st.forest.trees.values() if t.root.status == Status.SUCCESS]
        bar = statistics.median(roots) if roots else None
        if not result.ok:
            reason = result.reason
        elif bar is not None and not result.score > bar:
            reason = f"score {fmt_reward(result.score)} not above median root reward {fmt_reward(bar)}"
        else:
            reason = None
        if reason is not None:
            self._emit("redesign", None, None, elite=source, admitted=False, score=result.score, reason=reason)
            return
        tid = st.forest.create_tree(code, result, Origin.REDESIGN, label=f"redesign of {source}", summary="redesign")
        st.tree_tasks[tid] = task_id
        self._emit("redesign", tid, st.forest.tree(tid).root_id, elite=source, admitted=True, score=result.score,
                   reason=None)
        for removed in prune_forest(st.forest, cfg.retention, cfg.tree_weights.window):
            self._emit("pruned", removed, None, reason=FOREST_CAPACITY, nodes=[])

    def _abort(self, message: str) -> None:
        self._emit("aborted", reason=message)
        path = None if self.out_dir is None else self.checkpoint(self.out_dir / CHECKPOINT_FILE)
        raise RunAborted(message, path)

    # -- persistence -----------------------------------------------------------

    def payload(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "state": self.state.to_dict(),
            "backends": {role: b.state_dict() for role, b in self.backends.items() if hasattr(b, "state_dict")},
            "sexpr": {tid: to_sexpr(t) for tid, t in self.state.forest.trees.items()},
        }

    def checkpoint(self, path: str | os.PathLike) -> Path:
        return write_checkpoint(path, self.payload(), self.config.config_hash)

    @classmethod
    def restore(
        cls,
        path: str | os.PathLike,
        *,
        out_dir: str | os.PathLike | None = None,
        backends: dict[str, CompletionBackend] | None = None,
        executor: Executor | None = None,
        extra_epochs: int = 0,
    ) -> Orchestrator:
        """Rebuild a run from a checkpoint; ``extra_epochs`` extends the configured total."""
        _, payload = read_checkpoint(path)
        config = RunConfig.from_dict(payload["config"])
        if extra_epochs:
            config = config.replace(epochs=max(config.epochs, payload["state"]["epoch"]) + extra_epochs)
        state = RunState.from_dict(payload["state"])
        orch = cls(config, out_dir=out_dir, backends=backends, executor=executor, state=state)
        if backends is None:
            # shared instances receive the same saved state more than once, which is harmless
            for role, saved in payload.get("backends", {}).items():
                backend = orch.backends.get(role)
                if backend is not None and hasattr(backend, "load_state_dict"):
                    backend.load_state_dict(saved)
        return orch

    # -- outputs -----------------------------------------------------------------

    def forest_sexpr(self) -> str:
        return forest_to_sexpr(self.state.forest)

    def report_csv(self) -> str:
        return reward_series_csv(self.state.best_trace)

    def write_outputs(self) -> None:
        """Checkpoint, S-expression dump and reward series into the output directory."""
        if self.out_dir is None:
            raise ValueError("orchestrator has no output directory")
        self.checkpoint(self.out_dir / CHECKPOINT_FILE)
        (self.out_dir / SEXPR_FILE).write_text(self.forest_sexpr(), encoding="utf-8")
        (self.out_dir / REPORT_FILE).write_text(self.report_csv(), encoding="utf-8")


def reward_series_csv(trace: list[float | None]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "best_reward"])
    for epoch, value in enumerate(trace):
        writer.writerow([epoch, "" if value is None else repr(float(value))])
    return buf.getvalue()


def run(config: RunConfig, *, out_dir: str | os.PathLike | None = None, **kw: Any) -> RunResult:
    """Run ``config`` to completion and return the best candidate."""
    orch = Orchestrator(config, out_dir=out_dir, **kw)
    result = orch.run()
    if out_dir is not None:
        orch.write_outputs()
    return result
