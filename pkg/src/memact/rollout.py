"""Agent execution loop: sample an action, execute it in the environment or
on the working memory, log everything needed to re-score it later."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import features as F
from .environment import (
    OTHER, SUCCESS, TURN_CAP, VIOLATION, Environment, Task, is_parsable, judge, terminal_reward,
)
from .memory import IdSource, MemoryEdit, WorkingMemory, append, apply_edit
from .policy import ActionSample, PolicyParams, logprob, action_contexts, sample_action
from .tokenizer import VOCAB, decode, encode

log = logging.getLogger(__name__)

MALFORMED_OBSERVATION = "error : malformed action"
REPLAY_TOL = 1e-12


class Agent(Protocol):
    def act(self, memory: WorkingMemory, rng: np.random.Generator) -> ActionSample: ...


@dataclass
class PolicyAgent:
    params: PolicyParams
    greedy: bool = False

    def act(self, memory: WorkingMemory, rng: np.random.Generator) -> ActionSample:
        return sample_action(self.params, memory, rng, greedy=self.greedy)


def _scripted_sample(text: str) -> ActionSample:
    ids = encode(text)
    try:
        malformed = not ids or F.grammar_state(ids).slot != F.DONE
    except ValueError:
        malformed = True
    return ActionSample(decode(ids), ids, [0.0] * len(ids), malformed=malformed)


@dataclass
class ScriptedAgent:
    """Replays a fixed list of action strings, then repeats the last one."""

    actions: Sequence[str]
    _i: int = 0

    def act(self, memory: WorkingMemory, rng: np.random.Generator) -> ActionSample:
        text = self.actions[min(self._i, len(self.actions) - 1)]
        self._i += 1
        return _scripted_sample(text)


def expert_action(memory: WorkingMemory, use_memory: bool = True, answer_early: bool = False) -> str:
    """Demonstrator: prune raw tool output into its facts, search open hops, then answer.

    answer_early=True answers instead of searching, guessing each open
    objective's current frontier subject.
    """
    view = F.parse_memory(memory.token_ids())
    s = VOCAB.surfaces
    if use_memory:
        raw = [r for r in view.records if r.role in (F.R_TASK, F.R_OBS)]
        if any(r.role == F.R_OBS for r in raw):
            ids = [r.rid for r in raw]
            summary = decode(F.pruned_fact_tokens(view, ids))
            return MemoryEdit(summary, tuple(s[i] for i in ids)).render()
    frontiers = view.open_frontiers
    if frontiers and not answer_early:
        subj, rel = frontiers[0]
        return f"SEARCH {s[subj]} {s[rel]}"
    answers = [s[v] if k == "resolved" else s[v[0]] for k, v in view.status]  # type: ignore[index]
    return "ANSWER " + " ; ".join(answers) + " END"


@dataclass
class ExpertAgent:
    """Scripted demonstrator; with early_answer_rate > 0 it sometimes answers before finishing."""

    use_memory: bool = True
    early_answer_rate: float = 0.0

    def act(self, memory: WorkingMemory, rng: np.random.Generator) -> ActionSample:
        early = self.early_answer_rate > 0.0 and rng.random() < self.early_answer_rate
        return _scripted_sample(expert_action(memory, self.use_memory, early))


@dataclass
class Limits:
    turn_cap: int = TURN_CAP
    context_budget: int = 2_000

    def __post_init__(self) -> None:
        if self.turn_cap <= 0 or self.context_budget <= 0:
            raise ValueError("limits must be positive")


@dataclass
class Step:
    t: int
    kind: str  # "task" | "memory"
    event: str  # "search" | "answer" | "prune" | "malformed"
    action_text: str
    token_ids: list[int]
    logprobs: list[float]
    pre_snapshot: str
    pre_total_tokens: int
    observation: str
    post_total_tokens: int
    appended: str  # serialization of records appended by a task step
    edit_ok: bool | None = None


@dataclass
class Trajectory:
    traj_id: str
    prompt_id: str
    steps: list[Step]
    terminal_outcome: str
    reason: str
    ret: float
    seed: int
    objective_count: int
    per_objective: list[bool]
    final_snapshot: str

    @property
    def memory_action_indices(self) -> list[int]:
        return [s.t for s in self.steps if s.kind == "memory"]

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def success(self) -> bool:
        return self.terminal_outcome == SUCCESS

    # efficiency metrics; memory actions are not tool interactions
    @property
    def function_calls(self) -> int:
        return sum(1 for s in self.steps if s.event == "search")

    @property
    def memory_actions(self) -> int:
        return sum(1 for s in self.steps if s.kind == "memory")

    @property
    def total_input_tokens(self) -> int:
        return sum(s.pre_total_tokens for s in self.steps)

    @property
    def tokens_per_round(self) -> float:
        return self.total_input_tokens / len(self.steps) if self.steps else 0.0

    def to_records(self) -> list[dict]:
        head = {k: v for k, v in asdict(self).items() if k != "steps"}
        head["type"] = "trajectory"
        head["memory_action_indices"] = self.memory_action_indices
        return [head] + [{"type": "step", "traj_id": self.traj_id, **asdict(s)} for s in self.steps]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "Trajectory":
        head = dict(records[0])
        head.pop("type")
        head.pop("memory_action_indices", None)
        steps = []
        for r in records[1:]:
            r = dict(r)
            r.pop("type")
            r.pop("traj_id")
            steps.append(Step(**r))
        return cls(steps=steps, **head)


def parse_action(token_ids: Sequence[int]) -> tuple:
    """Structured form of a complete action: ("search", s, r) / ("answer", text) / ("prune", edit)."""
    s = VOCAB.surfaces
    if not token_ids:
        return ("malformed",)
    head = token_ids[0]
    if head == F.SEARCH and len(token_ids) == 3:
        return ("search", s[token_ids[1]], s[token_ids[2]])
    if head == F.ANSWER:
        return ("answer", decode(token_ids))
    if head == F.PRUNE:
        state = F.grammar_state(token_ids)
        return ("prune", MemoryEdit(decode(state.summary), tuple(s[i] for i in state.listed)))
    return ("malformed",)


def run_episode(agent: Agent, env: Environment, task: Task, limits: Limits, seed: int,
                controller: Callable[[WorkingMemory, IdSource], WorkingMemory] | None = None,
                traj_id: str | None = None) -> Trajectory:
    ss = np.random.SeedSequence(seed)
    sample_ss, id_ss, tool_ss = ss.spawn(3)
    rng = np.random.default_rng(sample_ss)
    ids = IdSource(id_ss)
    tool_base = int(tool_ss.generate_state(1)[0])
    memory = WorkingMemory.start(task.instruction(), ids)
    steps: list[Step] = []
    outcome, reason = VIOLATION, "turn_cap"
    per_objective = [False] * task.objective_count

    for t in range(1, limits.turn_cap + 1):
        pre = memory
        pre_text = pre.serialize()
        sample = agent.act(pre, rng)
        action = ("malformed",) if sample.malformed else parse_action(sample.token_ids)
        appended = ""
        edit_ok = None
        done = False
        if action[0] == "answer":
            ok, per_objective = judge(action[1], task)
            if ok:
                outcome, reason = SUCCESS, "answered"
            elif not is_parsable(action[1], task):
                outcome, reason = VIOLATION, "unparsable_answer"
            else:
                outcome, reason = OTHER, "wrong_answer"
            observation = "correct" if ok else "incorrect"
            event, kind, done = "answer", "task", True
        elif action[0] == "prune":
            memory, observation = apply_edit(pre, action[1], ids, action_text=sample.text)
            edit_ok = observation.startswith("ok")
            event, kind = "prune", "memory"
        else:
            if action[0] == "search":
                observation = env.search(action[1], action[2], seed=(tool_base, t)).content
                event = "search"
            else:
                observation = MALFORMED_OBSERVATION
                event = "malformed"
            kind = "task"
            memory = append(pre, sample.text, observation, ids)
            appended = "".join(r.line for r in memory.records[len(pre.records):])
            if controller is not None:
                memory = controller(memory, ids)
        steps.append(Step(t, kind, event, sample.text, list(sample.token_ids), list(sample.logprobs),
                          pre_text, pre.total_tokens, observation, memory.total_tokens, appended, edit_ok))
        if done:
            break
        if memory.total_tokens > limits.context_budget:
            outcome, reason = VIOLATION, "context_overflow"
            break
    return Trajectory(
        traj_id=traj_id or f"{task.task_id}:{seed}", prompt_id=task.task_id, steps=steps,
        terminal_outcome=outcome, reason=reason, ret=terminal_reward(outcome), seed=int(seed),
        objective_count=task.objective_count, per_objective=list(per_objective),
        final_snapshot=memory.serialize(),
    )


@dataclass
class ReplayResult:
    ok: bool
    mismatches: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def replay_check(trajectory: Trajectory, params: PolicyParams, tol: float = REPLAY_TOL) -> ReplayResult:
    """Re-score every stored token from its stored pre-action snapshot."""
    problems: list[str] = []
    for step in trajectory.steps:
        mem_tokens = encode(step.pre_snapshot)
        try:
            contexts = list(action_contexts(params, mem_tokens, step.token_ids))
        except ValueError as exc:
            problems.append(f"step {step.t}: cannot re-derive grammar state ({exc})")
            continue
        if len(step.logprobs) != len(step.token_ids):
            problems.append(f"step {step.t}: {len(step.logprobs)} logprobs for {len(step.token_ids)} tokens")
            continue
        for j, (ctx, recorded) in enumerate(zip(contexts, step.logprobs)):
            got = logprob(params, ctx.features, ctx.token, ctx.legal)
            if not abs(got - recorded) <= tol:
                problems.append(
                    f"step {step.t} token {j} ({VOCAB.surfaces[ctx.token]!r}): recorded {recorded!r}, "
                    f"recomputed {got!r}")
    return ReplayResult(not problems, problems)


def save_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajs:
            for rec in tr.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out: list[Trajectory] = []
    group: list[dict] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["type"] == "trajectory" and group:
            out.append(Trajectory.from_records(group))
            group = []
        group.append(rec)
    if group:
        out.append(Trajectory.from_records(group))
    return out


def render_trajectory(tr: Trajectory) -> str:
    """Human-readable trace with fracture points marked."""
    lines = [f"trajectory {tr.traj_id}  prompt={tr.prompt_id}  outcome={tr.terminal_outcome} "
             f"({tr.reason})  R={tr.ret:+.1f}  memory actions at {tr.memory_action_indices}"]
    for s in tr.steps:
        mark = ">>> FRACTURE" if s.kind == "memory" else "   "
        lines.append(f"{mark} t={s.t:<3d} [{s.kind:6s}] in={s.pre_total_tokens:<5d} "
                     f"out={s.post_total_tokens:<5d} {s.action_text}")
        if s.kind == "memory":
            lines.append(f"             -> {s.observation}")
    return "\n".join(lines)
