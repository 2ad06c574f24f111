"""Dynamic Context Policy Optimization.

Group-normalised trajectory advantages, a masked policy-gradient loss over
sampled segments, plain gradient-descent updates and the outer training loop.
Also the segmented supervised loss used for the cold start.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .environment import ConfigError, Environment, Task, hash_seed
from .policy import GradAccumulator, PolicyParams, SparseGrad
from .rollout import ExpertAgent, Limits, PolicyAgent, Trajectory, run_episode
from .segmentation import Segment, round_robin_sample, segment, token_contexts

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_traj: int = 4
    n_seg: int = 8
    batch_prompts: int = 8
    learning_rate: float = 0.5
    max_updates: int = 200
    seed: int = 0
    turn_cap: int = 35
    context_budget: int = 2_000
    sigma_epsilon_policy: float | None = None  # None: degenerate groups get zero advantage
    token_mean: bool = False
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.n_traj < 2:
            raise ConfigError("n_traj must be >= 2 for group statistics")
        if min(self.n_seg, self.batch_prompts, self.max_updates) < 0 or self.n_seg == 0 or self.batch_prompts == 0:
            raise ConfigError("n_seg, batch_prompts must be positive and max_updates >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")

    @property
    def limits(self) -> Limits:
        return Limits(self.turn_cap, self.context_budget)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_advantages(returns: Sequence[float], sigma_epsilon: float | None = None) -> np.ndarray:
    """(R - mean) / std with the population std of one prompt's group."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("advantage groups need at least two trajectories")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    mu = r.mean()
    sigma = r.std()
    if sigma_epsilon is None:
        return (r - mu) / sigma
    return (r - mu) / (sigma + sigma_epsilon)


def segment_loss_and_grad(seg: Segment, advantage: float, params: PolicyParams,
                          token_mean: bool = False) -> tuple[float, SparseGrad]:
    """loss = -A * sum over mask-1 tokens of log pi(y_t | rebuilt context)."""
    if advantage == 0.0 or seg.n_generated == 0:
        return 0.0, SparseGrad(params.feature_dim)
    coef = -advantage * (1.0 / seg.n_generated if token_mean else 1.0)  # loss = coef * sum logprob
    acc = GradAccumulator(params)
    lp = sum(acc.add_token(c.features, c.token, c.legal, coef) for c in token_contexts(seg, params))
    return coef * lp, acc.result()


@dataclass
class BatchItem:
    segment: Segment
    advantage: float
    group: str  # prompt-group key
    group_size: int


def batch_loss_and_grad(batch: Sequence[BatchItem], params: PolicyParams,
                        token_mean: bool = False) -> tuple[float, SparseGrad]:
    """Mean over prompt groups of (1/|G(u)|) * sum of that group's segment losses."""
    if not batch:
        raise ValueError("empty batch")
    n_groups = len({it.group for it in batch})
    loss = 0.0
    acc = GradAccumulator(params)
    for it in batch:
        w = 1.0 / (it.group_size * n_groups)
        seg_loss, g = segment_loss_and_grad(it.segment, it.advantage, params, token_mean)
        loss += w * seg_loss
        acc.add(g, w)
    return loss, acc.result()


class Optimizer:
    """Gradient descent with optional heavy-ball momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: np.ndarray | None = None
        self.tied_velocity: np.ndarray | None = None

    def step(self, params: PolicyParams, grad: SparseGrad, inplace: bool = True) -> PolicyParams:
        out = params if inplace else params.copy()
        lr = self.learning_rate
        if self.momentum == 0.0:
            if len(grad.rows):
                out.weights[grad.rows] -= lr * grad.data
            out.tied -= lr * grad.tied
            return out
        if self.velocity is None or self.tied_velocity is None:
            self.velocity = np.zeros_like(params.weights)
            self.tied_velocity = np.zeros_like(params.tied)
        self.velocity *= self.momentum
        self.velocity[grad.rows] += grad.data
        self.tied_velocity = self.momentum * self.tied_velocity + grad.tied
        out.weights -= lr * self.velocity
        out.tied -= lr * self.tied_velocity
        return out

    def state(self) -> dict[str, np.ndarray] | None:
        if self.velocity is None:
            return None
        return {"velocity": self.velocity, "tied_velocity": self.tied_velocity}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = np.array(state["velocity"], dtype=np.float64)
        self.tied_velocity = np.array(state["tied_velocity"], dtype=np.float64)


def batch_update(batch: Sequence[BatchItem], params: PolicyParams, config: TrainConfig,
                 optimizer: Optimizer | None = None, inplace: bool = False) -> PolicyParams:
    """One descent step on the batch loss; non-finite loss or gradient keeps the old params."""
    loss, grad = batch_loss_and_grad(batch, params, config.token_mean)
    if not (math.isfinite(loss) and grad.is_finite()):
        log.error("non-finite update skipped: loss=%r, grad finite=%s, %d segments",
                  loss, grad.is_finite(), len(batch))
        return params
    opt = optimizer or Optimizer(config.learning_rate, config.momentum)
    return opt.step(params, grad, inplace=inplace)


def sft_loss(segments: Segment | Sequence[Segment], params: PolicyParams,
             grammar_masked: bool = True) -> tuple[float, SparseGrad]:
    """Masked NLL over mask-1 tokens, averaged over all mask-1 tokens in the batch.

    grammar_masked=False scores tokens against the full vocabulary instead of
    the grammar-legal set (forced tokens then carry loss as well).
    """
    segs = [segments] if isinstance(segments, Segment) else list(segments)
    n_tokens = sum(s.n_generated for s in segs)
    if n_tokens == 0:
        return 0.0, SparseGrad(params.feature_dim)
    coef = -1.0 / n_tokens  # loss = coef * sum logprob
    acc = GradAccumulator(params)
    total = 0.0
    for s in segs:
        for c in token_contexts(s, params, full=not grammar_masked):
            total += acc.add_token(c.features, c.token, c.legal if grammar_masked else None, coef)
    return total * coef, acc.result()


def demonstrations(env: Environment, tasks: Sequence[Task], limits: Limits, use_memory: bool,
                   seed: int, early_answer_rate: float = 0.0) -> list[Trajectory]:
    agent = ExpertAgent(use_memory, early_answer_rate)
    return [run_episode(agent, env, task, limits, hash_seed(seed, i),
                        traj_id=f"demo:{task.task_id}:{i}")
            for i, task in enumerate(tasks)]


def sft_train(params: PolicyParams, segments: Sequence[Segment], epochs: int, learning_rate: float,
              batch_size: int, seed: int) -> tuple[PolicyParams, list[float]]:
    """Minibatch gradient descent on sft_loss. Updates params in place."""
    rng = np.random.default_rng(seed)
    losses = []
    opt = Optimizer(learning_rate)
    for _ in range(epochs):
        order = rng.permutation(len(segments))
        for a in range(0, len(order), batch_size):
            loss, grad = sft_loss([segments[i] for i in order[a:a + batch_size]], params)
            opt.step(params, grad)
            losses.append(loss)
    return params, losses


@dataclass
class IterationLog:
    update: int
    mean_return: float
    success_rate: float
    tokens_per_round: float
    function_calls: float
    memory_action_rate: float
    loss: float
    grad_norm: float
    n_segments: int
    applied: bool

    def row(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(IterationLog.__dataclass_fields__)


def rollout_group(params: PolicyParams, env: Environment, task: Task, config: TrainConfig,
                  iteration: int, prompt_index: int) -> list[Trajectory]:
    agent = PolicyAgent(params)
    return [run_episode(agent, env, task, config.limits,
                        hash_seed(config.seed, iteration, prompt_index, e),
                        traj_id=f"{task.task_id}:{iteration}:{prompt_index}:{e}")
            for e in range(config.n_traj)]


def train_iteration(params: PolicyParams, env: Environment, tasks: Sequence[Task], config: TrainConfig,
                    iteration: int, optimizer: Optimizer) -> tuple[PolicyParams, IterationLog]:
    rng = np.random.default_rng([config.seed, iteration, 0xDC90])
    picks = rng.choice(len(tasks), size=config.batch_prompts, replace=len(tasks) < config.batch_prompts)
    batch: list[BatchItem] = []
    all_trajs: list[Trajectory] = []
    for pi, ti in enumerate(picks):
        trajs = rollout_group(params, env, tasks[int(ti)], config, iteration, pi)
        all_trajs.extend(trajs)
        adv = compute_advantages([tr.ret for tr in trajs], config.sigma_epsilon_policy)
        adv_of = {tr.traj_id: a for tr, a in zip(trajs, adv)}
        pools = [segment(tr) for tr in trajs]
        group = f"{iteration}:{pi}"
        for seg in round_robin_sample(pools, config.n_seg, rng):
            batch.append(BatchItem(seg, float(adv_of[seg.trajectory_id]), group, len(trajs)))
    loss, grad = batch_loss_and_grad(batch, params, config.token_mean)
    applied = math.isfinite(loss) and grad.is_finite()
    if applied:
        params = optimizer.step(params, grad, inplace=True)
    else:
        log.error("iteration %d: non-finite loss/gradient, update skipped", iteration)
    n_steps = sum(tr.T for tr in all_trajs)
    entry = IterationLog(
        update=iteration + 1,
        mean_return=float(np.mean([tr.ret for tr in all_trajs])),
        success_rate=float(np.mean([tr.success for tr in all_trajs])),
        tokens_per_round=float(np.mean([tr.tokens_per_round for tr in all_trajs])),
        function_calls=float(np.mean([tr.function_calls for tr in all_trajs])),
        memory_action_rate=float(sum(tr.memory_actions for tr in all_trajs) / max(n_steps, 1)),
        loss=float(loss),
        grad_norm=grad.norm(),
        n_segments=len(batch),
        applied=applied,
    )
    return params, entry


def train(config: TrainConfig, tasks: Sequence[Task], env: Environment, params: PolicyParams,
          start_update: int = 0, optimizer: Optimizer | None = None,
          on_update: Callable[[PolicyParams, IterationLog], None] | None = None,
          ) -> tuple[PolicyParams, list[IterationLog]]:
    """DCPO outer loop. Updates params in place; randomness is keyed by (seed, update)."""
    if not tasks:
        raise ConfigError("empty task set")
    opt = optimizer or Optimizer(config.learning_rate, config.momentum)
    logs: list[IterationLog] = []
    for it in range(start_update, config.max_updates):
        try:
            params, entry = train_iteration(params, env, tasks, config, it, opt)
        except Exception as exc:
            raise RuntimeError(f"DCPO update {it + 1} failed: {exc}") from exc
        logs.append(entry)
        log.info("update %d  R=%.3f  success=%.2f  loss=%.4f  |g|=%.3f", entry.update,
                 entry.mean_return, entry.success_rate, entry.loss, entry.grad_norm)
        if on_update is not None:
            on_update(params, entry)
    return params, logs
