"""Deterministic stand-ins for the completion model on synthetic tasks.

The responder is stateless: every reply is a pure function of the prompt it
receives, so a run driven by it replays bit-for-bit and survives checkpoint
and restore without carrying backend state.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from evoforest.agents.backends import ScriptedBackend
from evoforest.testbed.tasks import SyntheticTask, get_synthetic

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_BUDGET_RE = re.compile(r"^epoch (\d+) of (\d+);", re.MULTILINE)
_MODE_RE = re.compile(r"^mode: (\w+)$", re.MULTILINE)
_STEP_RE = re.compile(r"^- (.+) \(dr=[^)]*\)$", re.MULTILINE)
_PARAMS_RE = re.compile(r"^Set PARAMS to (\[.*\])\.$", re.MULTILINE)
_TEXT_RE = re.compile(r"^Set TEXT to (.*)\.$", re.MULTILINE)
_REPAIR_RE = re.compile(r"^# Repair attempt (\d+) of (\d+)$", re.MULTILINE)

FAILURE_KINDS = ("crash", "syntax", "malformed", "timeout")


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _section(prompt: str, title: str) -> str:
    """Body of ``# title`` up to the next top-level heading outside a code fence."""
    body: list[str] = []
    inside = in_fence = False
    for line in prompt.splitlines(keepends=True):
        if not in_fence and line.startswith("# "):
            if inside:
                break
            inside = line[2:].startswith(title)
            continue
        if line.startswith("```"):
            in_fence = not in_fence
        if inside:
            body.append(line)
    return "".join(body)


def _fenced(text: str) -> str:
    m = _FENCE_RE.search(text)
    return m.group(1) if m else ""


@dataclass
class HillClimber:
    """Perturb one parameter per epoch with a geometrically decaying step.

    The step at epoch ``e`` is ``initial_step * decay**e``; its sign is the
    parity of the number of set bits in ``e``, so consecutive epochs try
    opposite directions even when round-robin scheduling hands a tree only odd
    or only even epochs. The perturbed coordinate cycles every two epochs.
    Explore mode doubles the step. With ``inject_failures`` a fraction of the
    modifications come back broken (crash, syntax error, missing SCORE line or
    timeout) and some proposals are malformed on the first ask.
    """

    task: SyntheticTask
    initial_step: float = 2.0
    decay: float = 0.85
    explore_factor: float = 2.0
    redesign_shift: float = 3.0
    inject_failures: bool = False
    failure_rate: int = 4
    hang_seconds: float = 30.0

    def __call__(self, system_prompt: str, user_prompt: str) -> str:
        role = system_prompt.split("\n", 1)[0].removeprefix("ROLE: ").strip()
        handler = {
            "next_stepper": self.propose,
            "modify_agent": self.implement,
            "designer": self.redesign,
            "summarizer": self.summarize,
        }.get(role)
        if handler is None:
            raise ValueError(f"hill climber has no script for role {role!r}")
        return handler(user_prompt)

    # -- next stepper ----------------------------------------------------

    def step_size(self, epoch: int, mode: str) -> float:
        step = self.initial_step * self.decay**epoch
        return step * self.explore_factor if mode == "explore" else step

    def propose(self, prompt: str) -> str:
        m = _BUDGET_RE.search(prompt)
        epoch = int(m.group(1)) if m else 0
        mm = _MODE_RE.search(prompt)
        mode = mm.group(1) if mm else "warmup"
        current = self.task.decode(_fenced(_section(prompt, "Current state")))
        if self.inject_failures and "# Format reminder" not in prompt and _digest(prompt) % 7 == 0:
            return "[HIGH-LEVEL] Nudge the parameters.\n[ANALYSIS] expected gain: small\n"
        if self.task.numeric:
            high, detailed = self._numeric_step(current, epoch, mode)
        else:
            high, detailed = self._text_step(current, epoch)
        return (
            f"[HIGH-LEVEL] {high}\n"
            f"[DETAILED]\n{detailed}\n"
            "[ANALYSIS]\n"
            "expected gain: moves toward a higher score if the local slope agrees\n"
            "risks: overshooting the optimum\n"
            "fallback: reverse the direction with a smaller step\n"
        )

    def _numeric_step(self, params: list[float], epoch: int, mode: str) -> tuple[str, str]:
        dim = (epoch // 2) % len(params)
        # Thue-Morse parity: neighbours alternate, and so does every stride-2 subsequence
        sign = 1.0 if bin(epoch).count("1") % 2 == 0 else -1.0
        step = self.step_size(epoch, mode)
        new = list(params)
        new[dim] = params[dim] + sign * step
        body = ", ".join(repr(v) for v in new)
        direction = "up" if sign > 0 else "down"
        return (
            f"Shift x{dim} {direction}. Step size {step:.6g}.",
            f"Set PARAMS to [{body}].\nOnly entry {dim} changes; the rest of the program stays as is.",
        )

    def _text_step(self, text: str, epoch: int) -> tuple[str, str]:
        tokens = text.split()
        vocab = self.task.vocabulary
        word = vocab[epoch % len(vocab)]
        if epoch % 3 == 2 and tokens:
            pos = (epoch // 3) % len(tokens)
            tokens[pos] = word
            high = f"Replace a token with '{word}'. Position {pos}."
        else:
            tokens.append(word)
            high = f"Append the token '{word}'."
        return high, f"Set TEXT to {' '.join(tokens)!r}."

    # -- modify agent ----------------------------------------------------

    def _intended(self, prompt: str) -> str:
        spec = _section(prompt, "Detailed specification")
        if self.task.numeric:
            m = _PARAMS_RE.search(spec)
            if not m:
                raise ValueError("detailed specification does not set PARAMS")
            return self.task.encode(self.task.decode(f"PARAMS = {m.group(1)}"))
        m = _TEXT_RE.search(spec)
        if not m:
            raise ValueError("detailed specification does not set TEXT")
        return self.task.encode(self.task.decode(f"TEXT = {m.group(1)}"))

    def _broken(self, code: str, kind: str) -> str:
        if kind == "crash":
            return code + "raise RuntimeError('scripted crash')\n"
        if kind == "syntax":
            return code + "def broken(:\n"
        if kind == "malformed":
            return code + "import os\nprint('no score here', flush=True)\nos._exit(0)\n"
        return code + f"import time\ntime.sleep({self.hang_seconds!r})\n"

    def implement(self, prompt: str) -> str:
        code = self._intended(prompt)
        if self.inject_failures:
            h = _digest(_section(prompt, "Detailed specification"))
            if h % self.failure_rate == 0:
                kind = FAILURE_KINDS[(h // self.failure_rate) % len(FAILURE_KINDS)]
                # repairs needed before the fix lands; 4 means the retries run out
                needed = 4 if (h // 16) % 5 == 0 else 1 + (h // 16) % 3
                m = _REPAIR_RE.search(prompt)
                attempt = int(m.group(1)) if m else 0
                if attempt < needed:
                    code = self._broken(code, kind)
        return f"```python\n{code}```\n"

    # -- designer and summarizer -----------------------------------------

    def redesign(self, prompt: str) -> str:
        elite = _fenced(_section(prompt, "Elite program"))
        value = self.task.decode(elite)
        if self.task.numeric:
            new = [v + self.redesign_shift for v in value]
            note = f"Relocate every parameter by {self.redesign_shift:g} to probe a distant basin."
        else:
            new = " ".join(reversed(value.split()))
            note = "Reverse the token order to restart from a different arrangement."
        return f"[REDESIGN] {note}\n```python\n{self.task.encode(new)}```\n"

    def summarize(self, prompt: str) -> str:
        seen: list[str] = []
        for s in _STEP_RE.findall(prompt):
            if s != "seed" and s not in seen:
                seen.append(s)
        if not seen:
            return "No productive modifications yet."
        head = "; then ".join(seen[:2])
        return f"Productive sequence: {head}. Smaller steps kept paying off late in each lineage."


def scripted_hill_climber(task: SyntheticTask | str, *, inject_failures: bool = False, **options) -> ScriptedBackend:
    """A replay backend serving every agent role for ``task``."""
    if isinstance(task, str):
        task = get_synthetic(task)
    return ScriptedBackend(responder=HillClimber(task, inject_failures=inject_failures, **options))
