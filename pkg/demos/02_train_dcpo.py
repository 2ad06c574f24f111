"""
Warm start, then DCPO
=====================

Supervised warm start on flawed demonstrations (they sometimes answer before
finishing the chain), then segmented policy-gradient training. Greedy success
on held-out questions is printed as training goes.
"""

import logging

import numpy as np

from memact.dcpo import TrainConfig, demonstrations, sft_train, train
from memact.environment import EnvConfig, Environment, generate_tasks
from memact.evaluation import evaluate
from memact.policy import PolicyParams
from memact.rollout import Limits
from memact.segmentation import segment

logging.getLogger("memact").setLevel(logging.ERROR)

env = Environment.from_config(EnvConfig(seed=0))
limits = Limits(turn_cap=35, context_budget=2000)
train_tasks = generate_tasks(env.graph, 200, [1], [2], seed=1, prefix="train")
eval_tasks = generate_tasks(env.graph, 50, [1], [2], seed=2, prefix="eval")


def greedy_success(params):
    return np.mean([t.success for t in evaluate(params, env, eval_tasks, limits, seed=7)])


# demonstrations answer early 30% of the time, so the cloned policy guesses too
demos = demonstrations(env, train_tasks[:40], limits, use_memory=True, seed=0, early_answer_rate=0.3)
print("demo success:", np.mean([d.success for d in demos]))
params = PolicyParams.zeros(1 << 16)
params, losses = sft_train(params, [s for d in demos for s in segment(d)], epochs=2, learning_rate=30.0,
                           batch_size=16, seed=0)
print(f"SFT loss {losses[0]:.3f} -> {losses[-1]:.3f}, greedy success {greedy_success(params):.2f}")

# reward only distinguishes right, wrong and over-budget; that is enough to stop the guessing
curve = []


def progress(p, entry):
    if entry.update % 25 == 0:
        s = greedy_success(p)
        curve.append((entry.update, s))
        print(f"update {entry.update:3d}  sampled success {entry.success_rate:.2f}  "
              f"memory-action rate {entry.memory_action_rate:.2f}  greedy success {s:.2f}")


params, logs = train(TrainConfig(max_updates=100, seed=0), train_tasks, env, params, on_update=progress)

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, ax = plt.subplots(figsize=(5, 3))
ax.plot([e.update for e in logs], [e.success_rate for e in logs], lw=1, label="sampled (train)")
ax.plot(*zip(*curve), "o-", label="greedy (eval)")
ax.set_xlabel("update")
ax.set_ylabel("success")
ax.legend()
fig.tight_layout()
fig.savefig("dcpo_curve.png", dpi=100)
print("wrote dcpo_curve.png")
