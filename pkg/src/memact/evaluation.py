"""Evaluation episodes and the per-query efficiency metrics.

Per query: accuracy (all objectives right), per-objective accuracy,
function calls (SEARCH steps only), total input tokens (sum over policy
invocations of the context length) and tokens per round (that total over the
number of invocations). Memory actions are counted separately.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .baselines import ControllerConfig, make_controller
from .environment import Environment, Task, hash_seed
from .policy import PolicyParams
from .rollout import Agent, Limits, PolicyAgent, Trajectory, run_episode

METRIC_NAMES = ("accuracy", "per_objective_accuracy", "function_calls", "total_tokens",
                "tokens_per_round", "memory_actions", "overflow_rate")


def evaluate(agent: Agent | PolicyParams, env: Environment, tasks: Sequence[Task], limits: Limits,
             seed: int, controller: ControllerConfig | None = None, greedy: bool = True) -> list[Trajectory]:
    """One episode per task; episode seeds depend only on (seed, task index)."""
    if isinstance(agent, PolicyParams):
        agent = PolicyAgent(agent, greedy=greedy)
    hook = make_controller(controller) if controller is not None else None
    return [run_episode(agent, env, task, limits, hash_seed(seed, i), controller=hook,
                        traj_id=f"eval:{task.task_id}")
            for i, task in enumerate(tasks)]


@dataclass
class MetricSummary:
    group: str
    n_queries: int
    accuracy: float
    per_objective_accuracy: float
    function_calls: float
    total_tokens: float
    tokens_per_round: float
    memory_actions: float
    overflow_rate: float

    def row(self) -> dict:
        return asdict(self)


def summarize_group(trajs: Sequence[Trajectory], group: str = "all") -> MetricSummary:
    if not trajs:
        raise ValueError("no trajectories to summarize")
    return MetricSummary(
        group=group,
        n_queries=len(trajs),
        accuracy=float(np.mean([t.success for t in trajs])),
        per_objective_accuracy=float(np.mean([np.mean(t.per_objective) for t in trajs])),
        function_calls=float(np.mean([t.function_calls for t in trajs])),
        total_tokens=float(np.mean([t.total_input_tokens for t in trajs])),
        tokens_per_round=float(np.mean([t.tokens_per_round for t in trajs])),
        memory_actions=float(np.mean([t.memory_actions for t in trajs])),
        overflow_rate=float(np.mean([t.reason == "context_overflow" for t in trajs])),
    )


def summarize(trajs: Sequence[Trajectory]) -> list[MetricSummary]:
    """Overall row followed by one row per objective count."""
    rows = [summarize_group(trajs)]
    for k in sorted({t.objective_count for t in trajs}):
        rows.append(summarize_group([t for t in trajs if t.objective_count == k], f"objectives={k}"))
    return rows
