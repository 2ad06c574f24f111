import logging

import numpy as np
import pytest

from memact.dcpo import demonstrations, sft_train
from memact.environment import EnvConfig, Environment, generate_tasks
from memact.policy import PolicyParams
from memact.rollout import Limits, PolicyAgent, run_episode
from memact.segmentation import segment

N_FEATURES_SMALL = 1 << 12


@pytest.fixture(autouse=True)
def _quiet_sampler(caplog):
    caplog.set_level(logging.ERROR, logger="memact.segmentation")


@pytest.fixture(scope="session")
def env():
    return Environment.from_config(EnvConfig(seed=0))


@pytest.fixture(scope="session")
def limits():
    return Limits(turn_cap=35, context_budget=2000)


@pytest.fixture(scope="session")
def tasks_1obj(env):
    return generate_tasks(env.graph, 40, [1], [2], seed=11, prefix="fx")


@pytest.fixture(scope="session")
def warm_params(env, limits, tasks_1obj):
    """A lightly fine-tuned MemAct policy: competent but still stochastic."""
    demos = demonstrations(env, tasks_1obj[:20], limits, use_memory=True, seed=0)
    segs = [s for d in demos for s in segment(d)]
    params = PolicyParams.zeros(N_FEATURES_SMALL)
    params, _ = sft_train(params, segs, epochs=2, learning_rate=300.0, batch_size=16, seed=0)
    return params


@pytest.fixture(scope="session")
def sampled_trajectories(env, limits, warm_params):
    """Episodes sampled from the warm policy on 1-3 objective tasks."""
    tasks = generate_tasks(env.graph, 30, [1, 2, 3], [2], seed=12, prefix="sx")
    agent = PolicyAgent(warm_params)
    return [run_episode(agent, env, tasks[i % len(tasks)], limits, seed=1000 + i) for i in range(60)]


def random_params(rng: np.random.Generator, n_features: int = N_FEATURES_SMALL, scale: float = 0.5,
                  **kw) -> PolicyParams:
    return PolicyParams.random(n_features, rng, scale=scale, **kw)


def _policy_with_prune_bias(n_features: int, bias: float, seed: int) -> PolicyParams:
    """Random weak policy whose START slot leans toward PRUNE by `bias` and away from ANSWER."""
    from memact import features as F
    params = PolicyParams.random(n_features, np.random.default_rng(seed), scale=0.3, token_cap=32)
    for is_open in (0, 1):  # structural START bias keys
        row = F.hasher_for(n_features)((3, F.START, F.K_BIAS, is_open))
        params.weights[row, F.PRUNE] += bias
        params.weights[row, F.ANSWER] -= 6.0
    return params


def random_trajectory_corpus(env, n: int, seed: int = 0, max_memory_actions: int = 6):
    """`n` policy-sampled episodes with 0..max_memory_actions memory actions each.

    Returns (trajectories, params_by_trajectory_id) so fidelity can be checked
    against the exact sampling-time parameters.
    """
    tasks = generate_tasks(env.graph, 50, [1, 2], [2], seed=seed + 3, prefix="rc")
    policies = [_policy_with_prune_bias(N_FEATURES_SMALL, b, seed * 10 + k)
                for k, b in enumerate((-6.0, 0.0, 6.0, 12.0))]
    rng = np.random.default_rng(seed)
    out, params_of = [], {}
    i = 0
    while len(out) < n:
        params = policies[i % len(policies)]
        limits = Limits(int(rng.integers(1, 15)), 2000)
        tr = run_episode(PolicyAgent(params), env, tasks[i % len(tasks)], limits, seed=seed * 100_003 + i,
                         traj_id=f"rc{i}")
        i += 1
        if tr.memory_actions <= max_memory_actions:
            out.append(tr)
            params_of[tr.traj_id] = params
    return out, params_of


@pytest.fixture(scope="session")
def random_corpus(env):
    return random_trajectory_corpus(env, 1000)


def directional_fd_check(loss_fn, params: PolicyParams, grad, rng: np.random.Generator, h: float = 1e-6):
    """(analytic, numeric) directional derivatives along a random direction over weights and tied.

    The direction is supported on the gradient's rows plus a few random rows, so
    both the reported entries and the claimed zeros are exercised.
    """
    rows = np.unique(np.concatenate([grad.rows, rng.integers(0, params.feature_dim, size=8)]))
    d_w = np.zeros_like(params.weights)
    d_w[rows] = rng.normal(size=(len(rows), params.weights.shape[1]))
    d_t = rng.normal(size=params.tied.shape)
    analytic = float(np.sum(grad.dense()[rows] * d_w[rows]) + grad.tied @ d_t)

    def shifted(c):
        p = params.copy()
        p.weights[rows] += c * d_w[rows]
        p.tied += c * d_t
        return loss_fn(p)

    numeric = (shifted(h) - shifted(-h)) / (2 * h)
    return analytic, numeric


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
