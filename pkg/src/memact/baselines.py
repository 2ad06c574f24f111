"""External memory controllers that the agent neither sees nor chooses.

Both run after every task-step append:

* ``sliding_window`` drops the earliest non-instruction records while the
  memory is over the trigger;
* ``sliding_window_summary`` folds the oldest half of the non-instruction
  records into one extractive summary once the trigger is reached.

A policy trained without memory actions plus ``strategy="none"`` is the
no-memory agent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import features as F
from .environment import ConfigError, DEFAULT_CONTEXT_BUDGET
from .memory import IdSource, Record, WorkingMemory
from .tokenizer import decode

STRATEGIES = ("none", "sliding_window", "sliding_window_summary")
# 8K of a 20K window, scaled to the default budget
DEFAULT_TRIGGER = int(DEFAULT_CONTEXT_BUDGET * 8_000 / 20_000)


@dataclass(frozen=True)
class ControllerConfig:
    strategy: str = "none"
    trigger_tokens: int = DEFAULT_TRIGGER

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown controller strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.trigger_tokens <= 0:
            raise ConfigError("trigger_tokens must be positive")

    def check_budget(self, context_budget: int) -> None:
        if self.strategy != "none" and not self.trigger_tokens < context_budget:
            raise ConfigError(f"trigger_tokens {self.trigger_tokens} must be below the budget {context_budget}")


def extract_facts(records) -> str:
    """Fact sentences embedded in the records' content, padding dropped."""
    out: list[int] = []
    for r in records:
        for a, b, c in F.facts_in(r.content_ids):
            out.extend((a, b, c, F.PERIOD))
    return decode(out)


def _sliding_window(memory: WorkingMemory, trigger: int) -> WorkingMemory:
    records = list(memory.records)
    total = memory.total_tokens
    while total > trigger and len(records) > 1:
        total -= records.pop(1).token_count
    return memory.with_records(records)


def _summarize_oldest_half(memory: WorkingMemory, trigger: int, id_source: IdSource) -> WorkingMemory:
    if memory.total_tokens < trigger:
        return memory
    body = memory.records[1:]
    if not body:
        return memory
    n_old = max(1, len(body) // 2)
    old, rest = body[:n_old], body[n_old:]
    summary = Record.make(id_source(), "summary", extract_facts(old))
    return memory.with_records((memory.records[0], summary) + tuple(rest))


def apply_controller(memory: WorkingMemory, config: ControllerConfig,
                     id_source: IdSource | None = None) -> WorkingMemory:
    if config.strategy == "none":
        return memory
    if config.strategy == "sliding_window":
        return _sliding_window(memory, config.trigger_tokens)
    if id_source is None:
        raise ValueError("the summary controller needs an id source for the summary record")
    return _summarize_oldest_half(memory, config.trigger_tokens, id_source)


def make_controller(config: ControllerConfig) -> Callable[[WorkingMemory, IdSource], WorkingMemory] | None:
    """Hook for run_episode; None when no controller is configured."""
    if config.strategy == "none":
        return None
    return lambda memory, ids: apply_controller(memory, config, ids)
