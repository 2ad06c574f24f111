"""
Why an agent needs to manage its memory
=======================================

Each search returns a few hundred tokens of noise around one fact. With four
questions of three hops, twelve searches cannot fit a 2,000 token budget, so
an agent that never forgets must overflow. Pruning, or an external
controller, keeps the context small.
"""

import logging

from memact.baselines import ControllerConfig
from memact.environment import EnvConfig, Environment, generate_tasks
from memact.evaluation import evaluate, summarize_group
from memact.rollout import ExpertAgent, Limits

logging.basicConfig(level=logging.WARNING)

env = Environment.from_config(EnvConfig(seed=0))
limits = Limits(turn_cap=35, context_budget=2000)
tasks = generate_tasks(env.graph, 20, [1, 4], [3], seed=3, prefix="p")

# minimum cost per search: 7-token action record + 200 noise + 4 fact + 4 framing
print("12 searches need at least", 12 * (7 + 208), "tokens")

runs = {
    "self-pruning": (ExpertAgent(use_memory=True), None),
    "no memory": (ExpertAgent(use_memory=False), None),
    "sliding window": (ExpertAgent(use_memory=False), ControllerConfig("sliding_window", 800)),
    "window + summary": (ExpertAgent(use_memory=False), ControllerConfig("sliding_window_summary", 800)),
}
print(f"{'agent':<18}{'objectives':>10}{'accuracy':>10}{'overflow':>10}{'tok/round':>11}")
for name, (agent, controller) in runs.items():
    trajs = evaluate(agent, env, tasks, limits, seed=0, controller=controller)
    for k in (1, 4):
        m = summarize_group([t for t in trajs if t.objective_count == k])
        print(f"{name:<18}{k:>10}{m.accuracy:>10.2f}{m.overflow_rate:>10.2f}{m.tokens_per_round:>11.1f}")

# the sliding window forgets facts it still needs; the summary keeps them
