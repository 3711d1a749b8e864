"""NextStepper, ModifyAgent and Designer over a completion backend.

Agents never touch the forest. They return values and the orchestrator
decides what to commit.
"""

from __future__ import annotations

import difflib
import logging
import re
from collections.abc import Callable
from dataclasses import dataclass, field

from evoforest.agents.backends import BackendError, CompletionBackend
from evoforest.agents.context import Context, render_prompt
from evoforest.elite_pool import EliteTrajectory
from evoforest.executor import EvalMode, EvalRequest, EvalResult, Limits, evaluate, reward_from
from evoforest.forest import AlgorithmNode
from evoforest.sexpr import fmt_reward

logger = logging.getLogger(__name__)

MAX_DEBUG_RETRIES = 3

NEXT_STEPPER_SYSTEM = (
    "ROLE: next_stepper\n"
    "You are the policy of an iterative program optimizer. From the target, the current "
    "program, its lineage and the exemplars, propose the single next modification.\n"
    "Reply with exactly three tagged sections:\n"
    "[HIGH-LEVEL] one or two sentences naming the modification and its intent\n"
    "[DETAILED] an execution-ready description of the exact change\n"
    "[ANALYSIS] lines 'expected gain: ...', 'risks: ...', 'fallback: ...'"
)

MODIFY_SYSTEM = (
    "ROLE: modify_agent\n"
    "You implement one specified modification with a minimal diff. Keep interfaces and the "
    "evaluation protocol unchanged and do not refactor unrelated code. Reply with the complete "
    "updated program in a single fenced code block."
)

DESIGNER_SYSTEM = (
    "ROLE: designer\n"
    "You perform structural redesigns when incremental edits stall: architectural "
    "refactoring, algorithmic paradigm shifts, information-flow changes. Start from the elite "
    "program, keep what the history shows works, and reply with a [REDESIGN] section holding "
    "one sentence of rationale followed by the complete new program in a fenced code block."
)

_SECTION_RE = re.compile(r"^\s*\[(HIGH-LEVEL|DETAILED|ANALYSIS)\]\s*", re.MULTILINE)
_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_ANALYSIS_FIELDS = {"expected gain": "expected_gain", "risks": "risks", "risk": "risks", "fallback": "fallback"}


class AgentError(RuntimeError):
    """Backend unavailable after its retries; the epoch is skipped."""


class ProposalFormatError(ValueError):
    def __init__(self, message: str, attempts: int, last_reply: str) -> None:
        super().__init__(message)
        self.attempts = attempts
        self.last_reply = last_reply


@dataclass(frozen=True)
class Analysis:
    expected_gain: str = ""
    risks: str = ""
    fallback: str = ""


@dataclass(frozen=True)
class Proposal:
    high_level: str
    detailed_spec: str
    analysis: Analysis = field(default_factory=Analysis)
    attempts: int = 1


def parse_proposal(text: str) -> Proposal:
    """Split a reply into its three tagged sections; ValueError names what is missing."""
    parts = _SECTION_RE.split(text)
    sections: dict[str, str] = {}
    for tag, body in zip(parts[1::2], parts[2::2]):
        if tag in sections:
            raise ValueError(f"section [{tag}] appears twice")
        sections[tag] = body.strip()
    missing = [t for t in ("HIGH-LEVEL", "DETAILED", "ANALYSIS") if not sections.get(t)]
    if missing:
        raise ValueError("missing or empty section(s): " + ", ".join(f"[{m}]" for m in missing))
    fields: dict[str, str] = {}
    loose: list[str] = []
    for line in sections["ANALYSIS"].splitlines():
        label, sep, rest = line.strip().lstrip("-* ").partition(":")
        name = _ANALYSIS_FIELDS.get(label.strip().lower()) if sep else None
        if name:
            fields[name] = rest.strip()
        elif line.strip():
            loose.append(line.strip())
    if not fields:
        fields["expected_gain"] = " ".join(loose)
    return Proposal(sections["HIGH-LEVEL"], sections["DETAILED"], Analysis(**fields))


def _format_reminder(prompt: str, problem: str) -> str:
    return (
        f"{prompt}\n# Format reminder\nYour previous reply could not be parsed ({problem}). "
        "Reply with exactly three sections: [HIGH-LEVEL], [DETAILED], [ANALYSIS].\n"
    )


def next_step(context: Context, backend: CompletionBackend, *, reasks: int = 2, temperature: float = 0.2) -> Proposal:
    """Ask the policy for the next modification, re-asking on malformed replies."""
    base = render_prompt(context)
    prompt = base
    reply = ""
    for attempt in range(reasks + 1):
        try:
            reply = backend.complete(NEXT_STEPPER_SYSTEM, prompt, temperature=temperature)
        except BackendError as exc:
            raise AgentError(str(exc)) from exc
        try:
            proposal = parse_proposal(reply)
        except ValueError as exc:
            prompt = _format_reminder(base, str(exc))
            continue
        return Proposal(proposal.high_level, proposal.detailed_spec, proposal.analysis, attempt + 1)
    raise ProposalFormatError(f"unparseable proposal after {reasks + 1} attempts", reasks + 1, reply)


def extract_code(reply: str) -> str:
    """Contents of the first fenced block, or the whole reply when unfenced."""
    m = _FENCE_RE.search(reply)
    code = m.group(1) if m else reply
    return code.strip("\n") + "\n"


def edit_distance_ratio(before: str, after: str) -> float:
    """Normalized edit distance in [0, 1]; 0 means identical."""
    return 1.0 - difflib.SequenceMatcher(None, before, after, autojunk=False).ratio()


Executor = Callable[[EvalRequest], EvalResult]


@dataclass(frozen=True)
class ModifyOutcome:
    code: str
    result: EvalResult
    debug_attempts: int
    reward: float
    delta_reward: float
    diff_ratio: float
    failures: tuple[str, ...] = ()


def _modify_prompt(proposal: Proposal, parent: AlgorithmNode) -> str:
    return (
        "# Modification to implement\n"
        f"{proposal.high_level}\n\n"
        "# Detailed specification\n"
        f"{proposal.detailed_spec}\n\n"
        "# Current program\n"
        f"```\n{parent.code.rstrip()}\n```\n"
    )


def _repair_prompt(proposal: Proposal, code: str, reason: str, logs: str, attempt: int) -> str:
    tail = logs.strip()[-1500:]
    return (
        f"# Repair attempt {attempt} of {MAX_DEBUG_RETRIES}\n"
        "The previous implementation failed. Diagnose the failure and apply a targeted fix that "
        "preserves the original modification intent; do not change unrelated code.\n\n"
        f"# Failure\n{reason}\n"
        + (f"\n# Log tail\n```\n{tail}\n```\n" if tail else "")
        + f"\n# Original modification\n{proposal.high_level}\n\n"
        f"# Detailed specification\n{proposal.detailed_spec}\n\n"
        f"# Failing program\n```\n{code.rstrip()}\n```\n"
    )


def modify(
    proposal: Proposal,
    parent: AlgorithmNode,
    backend: CompletionBackend,
    executor: Executor | None = None,
    *,
    task_ref: str,
    limits: Limits = Limits(),
    max_retries: int = MAX_DEBUG_RETRIES,
    temperature: float = 0.0,
) -> ModifyOutcome:
    """Implement ``proposal`` on ``parent`` and validate it.

    Each attempt runs a dry-run probe (syntax and constraints) and then the
    sandboxed evaluation. Failures trigger up to ``max_retries`` targeted
    repair requests. Every failure is returned as a value.
    """
    run = executor or evaluate
    prompt = _modify_prompt(proposal, parent)
    code = parent.code
    failures: list[str] = []
    result = EvalResult.failure("no attempt made")
    repairs = 0
    for attempt in range(max_retries + 1):
        if attempt:
            repairs += 1
            prompt = _repair_prompt(proposal, code, result.reason or "", result.logs, attempt)
        try:
            code = extract_code(backend.complete(MODIFY_SYSTEM, prompt, temperature=temperature))
        except BackendError as exc:
            result = EvalResult.failure(f"backend error: {exc}")
            failures.append(result.reason)
            continue
        result = run(EvalRequest(code, task_ref, limits, EvalMode.DRY_RUN))
        if result.ok:
            result = run(EvalRequest(code, task_ref, limits, EvalMode.FULL))
        if result.ok:
            break
        failures.append(result.reason)
        logger.debug("modify attempt %d failed: %s", attempt + 1, result.reason)
    reward, delta = reward_from(result, parent.reward)
    return ModifyOutcome(
        code=code,
        result=result,
        debug_attempts=repairs,
        reward=reward,
        delta_reward=delta,
        diff_ratio=edit_distance_ratio(parent.code, code),
        failures=tuple(failures),
    )


class DesignerError(RuntimeError):
    pass


def _design_prompt(elite: EliteTrajectory, context: Context) -> str:
    lines = [
        "# Target",
        f"objective: {context.target.objective} ({context.target.direction})",
    ]
    if context.target.constraints:
        lines += ["constraints:"] + [f"- {c}" for c in context.target.constraints]
    lines += [
        "",
        f"# Elite program ({elite.source_tree}/{elite.trajectory.node_id}, reward={fmt_reward(elite.final_reward)})",
        "```",
        elite.final_code.rstrip(),
        "```",
        "",
        "# Its lineage",
    ]
    lines += [f"- {s.modification_summary} (dr={fmt_reward(s.delta_reward)})" for s in elite.trajectory.steps]
    others = [e for e in context.elite_trajectories if e.source_tree != elite.source_tree]
    if others:
        lines += ["", "# Related elite lineages"]
        for e in others:
            lines.append(f"## {e.source_tree}/{e.trajectory.node_id} final={fmt_reward(e.final_reward)}")
            lines += [f"- {s.modification_summary}" for s in e.trajectory.steps]
    if context.summaries:
        lines += ["", "# Distilled patterns"] + [f"- {s.text}" for s in context.summaries]
    return "\n".join(lines) + "\n"


def design(
    elite: EliteTrajectory | None,
    context: Context,
    backend: CompletionBackend,
    *,
    reasks: int = 2,
    temperature: float = 0.7,
) -> str:
    """Ask for a holistic redesign seeded from ``elite``; returns the new program text."""
    if elite is None or not elite.final_code:
        raise DesignerError("redesign needs a non-empty elite pool")
    base = _design_prompt(elite, context)
    prompt = base
    for _ in range(reasks + 1):
        try:
            reply = backend.complete(DESIGNER_SYSTEM, prompt, temperature=temperature)
        except BackendError as exc:
            raise AgentError(str(exc)) from exc
        if _FENCE_RE.search(reply):
            return extract_code(reply)
        prompt = base + "\n# Format reminder\nInclude the complete program in a fenced code block.\n"
    raise ProposalFormatError("redesign reply had no code block", reasks + 1, reply)
