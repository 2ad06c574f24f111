"""Experiment configuration read from a JSON file.

Every command of the driver takes one config; all randomness derives from its
seed, and its canonical JSON hash is stamped into every CSV it produces.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .baselines import ControllerConfig, DEFAULT_TRIGGER
from .dcpo import TrainConfig
from .environment import ConfigError, EnvConfig, MAX_OBJECTIVES
from .features import DEFAULT_N_FEATURES, DEFAULT_WINDOW
from .policy import DEFAULT_TOKEN_CAP, PolicyParams
from .rollout import Limits

AGENTS = ("memact", "no_memory", "sliding_window", "sliding_window_summary")
MAX_TRAIN_OBJECTIVES = 4


@dataclass(frozen=True)
class TaskSetConfig:
    count: int = 100
    objective_counts: tuple[int, ...] = (1,)
    hops: tuple[int, ...] = (2,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "objective_counts", tuple(int(k) for k in self.objective_counts))
        object.__setattr__(self, "hops", tuple(int(h) for h in self.hops))
        if self.count <= 0:
            raise ConfigError("task count must be positive")
        if not self.objective_counts or not self.hops:
            raise ConfigError("objective_counts and hops must be non-empty")
        if any(not 1 <= k <= MAX_OBJECTIVES for k in self.objective_counts):
            raise ConfigError(f"objective counts must lie in [1, {MAX_OBJECTIVES}]")
        if any(not 2 <= h <= 4 for h in self.hops):
            raise ConfigError("hops must lie in [2, 4]")


@dataclass(frozen=True)
class PolicyConfig:
    n_features: int = DEFAULT_N_FEATURES
    window: int = DEFAULT_WINDOW
    temperature: float = 1.0
    token_cap: int = DEFAULT_TOKEN_CAP

    def __post_init__(self) -> None:
        if self.n_features <= 0 or self.window < 0 or self.token_cap <= 0 or not self.temperature > 0:
            raise ConfigError("invalid policy settings")

    def init_params(self, allow_memory: bool) -> PolicyParams:
        return PolicyParams.zeros(self.n_features, temperature=self.temperature, window=self.window,
                                  allow_memory=allow_memory, token_cap=self.token_cap)


@dataclass(frozen=True)
class WarmStartConfig:
    """Segmented SFT on scripted demonstrations before DCPO; demos=0 skips it.

    early_answer_rate makes the demonstrator answer before resolving a chain
    at that per-turn rate, so the warm start carries a flaw that reward can fix.
    """

    demos: int = 40
    epochs: int = 2
    learning_rate: float = 30.0
    batch_size: int = 16
    early_answer_rate: float = 0.3

    def __post_init__(self) -> None:
        if self.demos < 0 or self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ConfigError("invalid warm-start settings")
        if not 0.0 <= self.early_answer_rate <= 1.0:
            raise ConfigError("invalid warm-start settings")


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int = 0
    output_dir: str = "runs/default"
    agent: str = "memact"
    world: EnvConfig = field(default_factory=EnvConfig)
    train_tasks: TaskSetConfig = field(default_factory=TaskSetConfig)
    eval_tasks: TaskSetConfig = field(default_factory=lambda: TaskSetConfig(count=50))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trigger_tokens: int = DEFAULT_TRIGGER
    checkpoint_every: int = 10

    def __post_init__(self) -> None:
        if self.agent not in AGENTS:
            raise ConfigError(f"agent must be one of {AGENTS}")
        if max(self.train_tasks.objective_counts) > MAX_TRAIN_OBJECTIVES:
            raise ConfigError(f"training objective counts must lie in [1, {MAX_TRAIN_OBJECTIVES}]")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")
        if (self.train.turn_cap, self.train.context_budget) != (self.world.turn_cap, self.world.context_budget):
            raise ConfigError("train limits must match the world's turn cap and context budget")
        self.controller.check_budget(self.world.context_budget)

    @property
    def allow_memory(self) -> bool:
        return self.agent == "memact"

    @property
    def controller(self) -> ControllerConfig:
        strategy = self.agent if self.agent.startswith("sliding") else "none"
        return ControllerConfig(strategy, self.trigger_tokens)

    @property
    def limits(self) -> Limits:
        return Limits(self.world.turn_cap, self.world.context_budget)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"]["noise_range"] = list(self.world.noise_range)
        for k in ("train_tasks", "eval_tasks"):
            d[k]["objective_counts"] = list(d[k]["objective_counts"])
            d[k]["hops"] = list(d[k]["hops"])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        world = _build(EnvConfig, data.pop("world", None), "world")
        train = dict(data.pop("train", None) or {})
        train.setdefault("turn_cap", world.turn_cap)
        train.setdefault("context_budget", world.context_budget)
        train.setdefault("seed", data.get("seed", 0))
        return cls(
            world=world,
            train_tasks=_build(TaskSetConfig, data.pop("train_tasks", None), "train_tasks"),
            eval_tasks=_build(TaskSetConfig, data.pop("eval_tasks", None) or {"count": 50}, "eval_tasks"),
            policy=_build(PolicyConfig, data.pop("policy", None), "policy"),
            warm_start=_build(WarmStartConfig, data.pop("warm_start", None), "warm_start"),
            train=_build(TrainConfig, train, "train"),
            **data,
        )


def load_spec(path: str | Path) -> ExperimentSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentSpec.from_dict(data)
