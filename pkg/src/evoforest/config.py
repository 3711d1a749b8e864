"""Run configuration: a versioned JSON document with field-level validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

from evoforest.agents.context import ContextSizes
from evoforest.executor import Limits
from evoforest.pruning import RetentionWeights
from evoforest.sampling import SamplingParams, TreeScoreWeights

CONFIG_VERSION = 1
ROLES = ("next_stepper", "modify_agent", "designer", "summarizer")
BACKEND_KINDS = {
    "hill_climber": {"task", "inject_failures", "initial_step", "decay", "explore_factor", "redesign_shift",
                     "failure_rate", "hang_seconds"},
    "replay": {"path"},
    "http": {"base_url", "model", "api_key_env", "timeout", "retries", "backoff"},
}
_REQUIRED_BACKEND_KEYS = {"replay": {"path"}, "http": {"base_url", "model"}}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass(frozen=True)
class SeedConfig:
    task: str | None = None
    code: str | None = None
    label: str = ""


@dataclass(frozen=True)
class PruningConfig:
    stagnation_rounds: int = 10
    percentile: float = 25.0
    compaction_horizon: int = 20

    def __post_init__(self) -> None:
        if self.stagnation_rounds < 1:
            raise ValueError("stagnation_rounds must be >= 1")
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must be in (0, 100)")
        if self.compaction_horizon < 0:
            raise ValueError("compaction_horizon must be >= 0")


@dataclass(frozen=True)
class ModeConfig:
    plateau: int = 8
    diversity: float = 0.2
    streak: int = 3
    value: float = 0.1

    def __post_init__(self) -> None:
        if self.plateau < 1 or self.streak < 1:
            raise ValueError("plateau and streak must be >= 1")
        if not 0 <= self.diversity <= 1:
            raise ValueError("diversity must be in [0, 1]")


@dataclass(frozen=True)
class MacroConfig:
    plateau: int = 15
    diversity: float = 0.15
    cooldown: int = 20
    summarize_interval: int = 10

    def __post_init__(self) -> None:
        if self.plateau < 1:
            raise ValueError("plateau must be >= 1")
        if not 0 <= self.diversity <= 1:
            raise ValueError("diversity must be in [0, 1]")
        if self.cooldown < 0 or self.summarize_interval < 0:
            raise ValueError("cooldown and summarize_interval must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    task: str | None = None
    epochs: int = 50
    warmup_epochs: int = 10
    seeds: tuple[SeedConfig, ...] = (SeedConfig(),)
    sampling: SamplingParams = SamplingParams()
    tree_weights: TreeScoreWeights = TreeScoreWeights()
    retention: RetentionWeights = RetentionWeights()
    forest_capacity: int = 8
    elite_k: int = 16
    pruning: PruningConfig = PruningConfig()
    modes: ModeConfig = ModeConfig()
    macro: MacroConfig = MacroConfig()
    limits: Limits = Limits()
    context: ContextSizes = ContextSizes()
    token_budget: int | None = None
    backends: dict[str, dict[str, Any]] = field(default_factory=lambda: {"default": {"kind": "hill_climber"}})
    checkpoint_interval: int = 10
    islands: int = 1
    gate: str = "delta"
    executor: str = "process"
    container: dict[str, Any] | None = None
    max_backend_failures: int = 3
    format_version: int = CONFIG_VERSION

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def backend_for(self, role: str) -> dict[str, Any]:
        return self.backends.get(role) or self.backends["default"]

    def task_of(self, seed: SeedConfig) -> str:
        return seed.task or self.task  # validated non-empty

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: Any) -> RunConfig:
        return _parse_run_config(data)

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunConfig:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {os.fspath(path)}: {exc.strerror}") from None
        return cls.from_json(text)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Check ``value`` against the type of ``default``; ints widen to float."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(where, f"expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    raise ConfigError(where, "unsupported field")


def _section(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}", "unknown field")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _optional_str(data: dict, key: str, where: str) -> str | None:
    value = data.get(key)
    if value is not None and (not isinstance(value, str) or not value):
        raise ConfigError(f"{where}.{key}", "expected a non-empty string")
    return value


def _parse_seed(data: Any, where: str) -> SeedConfig:
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    for key in data:
        if key not in ("task", "code", "label"):
            raise ConfigError(f"{where}.{key}", "unknown field")
    label = data.get("label", "")
    if not isinstance(label, str):
        raise ConfigError(f"{where}.label", "expected a string")
    return SeedConfig(_optional_str(data, "task", where), _optional_str(data, "code", where), label)


def _parse_backend(data: Any, where: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    kind = data.get("kind")
    if kind not in BACKEND_KINDS:
        raise ConfigError(f"{where}.kind", f"expected one of {sorted(BACKEND_KINDS)}, got {kind!r}")
    for key in data:
        if key != "kind" and key not in BACKEND_KINDS[kind]:
            raise ConfigError(f"{where}.{key}", f"unknown field for a {kind} backend")
    for key in _REQUIRED_BACKEND_KEYS.get(kind, ()):
        if key not in data:
            raise ConfigError(f"{where}.{key}", "required field is missing")
    if "inject_failures" in data and not isinstance(data["inject_failures"], bool):
        raise ConfigError(f"{where}.inject_failures", "expected a boolean")
    return dict(data)


_SECTIONS = {
    "sampling": SamplingParams,
    "tree_weights": TreeScoreWeights,
    "retention": RetentionWeights,
    "pruning": PruningConfig,
    "modes": ModeConfig,
    "macro": MacroConfig,
    "limits": Limits,
    "context": ContextSizes,
}

_NONNEG_INTS = ("epochs", "warmup_epochs", "checkpoint_interval")
_POS_INTS = ("forest_capacity", "elite_k", "islands", "max_backend_failures")


def _parse_run_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<document>", "expected a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")
    version = data.get("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("format_version", f"unsupported version {version!r} (expected {CONFIG_VERSION})")
    if "seed" not in data:
        raise ConfigError("seed", "required field is missing (runs must be reproducible)")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")

    kw: dict[str, Any] = {"seed": seed}
    for name in _NONNEG_INTS + _POS_INTS:
        if name in data:
            value = _coerce(data[name], 0, name)
            if value < (1 if name in _POS_INTS else 0):
                raise ConfigError(name, f"must be >= {1 if name in _POS_INTS else 0}, got {value}")
            kw[name] = value
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _section(cls, data[name], name)
    if "task" in data:
        kw["task"] = _optional_str(data, "task", "<document>")
    if data.get("token_budget") is not None:
        budget = _coerce(data["token_budget"], 0, "token_budget")
        if budget < 1:
            raise ConfigError("token_budget", "must be positive")
        kw["token_budget"] = budget
    if "gate" in data:
        if data["gate"] not in ("delta", "absolute"):
            raise ConfigError("gate", f"expected 'delta' or 'absolute', got {data['gate']!r}")
        kw["gate"] = data["gate"]
    if "executor" in data:
        if data["executor"] not in ("process", "container"):
            raise ConfigError("executor", f"expected 'process' or 'container', got {data['executor']!r}")
        kw["executor"] = data["executor"]
    if data.get("container") is not None:
        if not isinstance(data["container"], dict) or "image" not in data["container"]:
            raise ConfigError("container", "expected an object with an 'image' field")
        kw["container"] = dict(data["container"])
    if kw.get("executor") == "container" and "container" not in kw:
        raise ConfigError("container", "required when executor is 'container'")

    if "seeds" in data:
        seeds = data["seeds"]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds", "expected a non-empty list")
        kw["seeds"] = tuple(_parse_seed(s, f"seeds[{i}]") for i, s in enumerate(seeds))
    for i, s in enumerate(kw.get("seeds", RunConfig.__dataclass_fields__["seeds"].default)):
        if not (s.task or kw.get("task")):
            raise ConfigError(f"seeds[{i}].task", "no task given here or at the top level")
    if len(kw.get("seeds", ())) > kw.get("forest_capacity", 8):
        raise ConfigError("seeds", "more seeds than forest_capacity")

    if "backends" in data:
        backends = data["backends"]
        if not isinstance(backends, dict):
            raise ConfigError("backends", "expected an object keyed by role")
        parsed = {}
        for role, spec in backends.items():
            if role != "default" and role not in ROLES:
                raise ConfigError(f"backends.{role}", f"unknown role (expected default or one of {list(ROLES)})")
            parsed[role] = _parse_backend(spec, f"backends.{role}")
        missing = [r for r in ROLES if r not in parsed]
        if missing and "default" not in parsed:
            raise ConfigError(f"backends.{missing[0]}", "no backend for this role and no default")
        kw["backends"] = parsed
    return RunConfig(**kw)
