"""
Working memory, fractures and segments
======================================

A scripted agent solves one two-hop question while pruning its own memory.
Every successful PRUNE rewrites the context, so the episode splits into
segments that each have a single consistent prefix.
"""

import logging

from memact.environment import EnvConfig, Environment, generate_task
from memact.rollout import ExpertAgent, Limits, render_trajectory, run_episode
from memact.segmentation import segment
from memact.tokenizer import decode

logging.basicConfig(level=logging.WARNING)

# a small seeded world: entities, relations and one function per relation
env = Environment.from_config(EnvConfig(seed=0))
task = generate_task(env.graph, 1, 2, seed=4, task_id="demo")
print(task.instruction())
print("ground truth:", task.ground_truth)

# the demonstrator searches, then folds each noisy observation into a fact summary
limits = Limits(turn_cap=35, context_budget=2000)
traj = run_episode(ExpertAgent(use_memory=True), env, task, limits, seed=0)
print(render_trajectory(traj))

# after the prune the context is no longer an extension of what came before
for step, nxt in zip(traj.steps, traj.steps[1:]):
    if step.kind == "memory":
        print(f"step {step.t}: {step.pre_total_tokens} tokens before, {nxt.pre_total_tokens} after")

# K memory actions give K+1 segments; the mask selects the tokens the policy generated
for seg in segment(traj):
    n_prefix = len(seg.prefix_tokens)
    print(f"\nsegment {seg.segment_index}: steps {seg.steps}, prefix {n_prefix} tokens, "
          f"{seg.n_generated} generated, mask ones {int(seg.mask.sum())}")
    print("  generated:", decode(seg.generated_tokens)[:120])
