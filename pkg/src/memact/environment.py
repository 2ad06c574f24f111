"""Synthetic multi-objective, multi-hop QA world.

A seeded knowledge graph of (subject, relation, object) facts, questions that
are relation chains from a start entity, a search tool that buries the one
true fact in filler sentences, an exact-match judge and the sparse terminal
reward.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import ENTITY_POOL, FILLER_WORDS, RELATION_POOL, canonical, split

R_TASK = 1.0
R_PEN = -0.1
CONTEXT_LIMIT_FULL_SCALE = 20_000
TURN_CAP = 35
DEFAULT_CONTEXT_BUDGET = 2_000
DEFAULT_NOISE = (200, 400)
MAX_OBJECTIVES = 8

SUCCESS, VIOLATION, OTHER = "success", "violation", "other"


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    facts: tuple[tuple[str, str, str], ...]
    seed: int
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {}
        for s, r, o in self.facts:
            if (s, r) in index:
                raise ValueError(f"relation {r} of {s} is not functional")
            index[(s, r)] = o
        object.__setattr__(self, "index", index)

    def lookup(self, subject: str, relation: str) -> str | None:
        return self.index.get((subject, relation))

    def out_edges(self, subject: str) -> list[tuple[str, str]]:
        return [(r, o) for (s, r), o in self.index.items() if s == subject]

    def walk(self, start: str, relations: Sequence[str]) -> str | None:
        cur: str | None = start
        for r in relations:
            cur = self.lookup(cur, r)
            if cur is None:
                return None
        return cur

    def to_dict(self) -> dict:
        return {"seed": self.seed, "entities": list(self.entities), "relations": list(self.relations),
                "facts": [list(f) for f in self.facts]}

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeGraph":
        return cls(tuple(d["entities"]), tuple(d["relations"]), tuple(tuple(f) for f in d["facts"]), int(d["seed"]))


def generate_world(seed: int, n_entities: int, n_relations: int, max_out_degree: int = 3) -> KnowledgeGraph:
    """Seeded acyclic, functional, weakly connected fact graph.

    Entities are ranked by a random order and every edge points to a
    higher-ranked entity, so the graph has no cycles at all and each
    (subject, relation) pair has at most one object.
    """
    if n_entities < 10 or n_relations < 3:
        raise ConfigError("need n_entities >= 10 and n_relations >= 3")
    if n_entities > len(ENTITY_POOL) or n_relations > len(RELATION_POOL):
        raise ConfigError(f"at most {len(ENTITY_POOL)} entities and {len(RELATION_POOL)} relations")
    rng = np.random.default_rng(seed)
    entities = [ENTITY_POOL[i] for i in rng.permutation(len(ENTITY_POOL))[:n_entities]]
    relations = [RELATION_POOL[i] for i in rng.permutation(len(RELATION_POOL))[:n_relations]]
    used: dict[str, set[str]] = {e: set() for e in entities}
    facts: list[tuple[str, str, str]] = []
    has_parent = [False] * n_entities
    for i, subj in enumerate(entities[:-1]):
        k = int(rng.integers(1, min(max_out_degree, n_relations) + 1))
        for r_idx in rng.permutation(n_relations)[:k]:
            # bias objects towards nearby ranks so long chains exist
            span = n_entities - 1 - i
            j = i + 1 + int(min(rng.geometric(0.25) - 1, span - 1))
            rel = relations[r_idx]
            used[subj].add(rel)
            facts.append((subj, rel, entities[j]))
            has_parent[j] = True
    for j in range(1, n_entities):
        if has_parent[j]:
            continue
        for i in rng.permutation(j):
            free = [r for r in relations if r not in used[entities[i]]]
            if free:
                rel = free[int(rng.integers(len(free)))]
                used[entities[i]].add(rel)
                facts.append((entities[i], rel, entities[j]))
                has_parent[j] = True
                break
        if not has_parent[j]:
            raise GenerationError("could not connect the graph; use more relations")
    return KnowledgeGraph(tuple(entities), tuple(relations), tuple(facts), int(seed))


@dataclass(frozen=True)
class Objective:
    start: str
    relations: tuple[str, ...]

    def question(self, number: int) -> str:
        return f"question {number} : {self.start} {' '.join(self.relations)} ?"


@dataclass(frozen=True)
class Task:
    task_id: str
    objectives: tuple[Objective, ...]
    ground_truth: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.objectives) != len(self.ground_truth):
            raise ValueError("one ground-truth answer per objective")

    @property
    def objective_count(self) -> int:
        return len(self.objectives)

    @property
    def hops(self) -> int:
        return max(len(o.relations) for o in self.objectives)

    def instruction(self) -> str:
        head = "answer every question in order with ANSWER ."
        return canonical(" ".join([head] + [o.question(i + 1) for i, o in enumerate(self.objectives)]))

    def to_json(self) -> str:
        return json.dumps({
            "task_id": self.task_id,
            "objectives": [{"start": o.start, "relations": list(o.relations)} for o in self.objectives],
            "ground_truth": list(self.ground_truth),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Task":
        d = json.loads(line)
        objs = tuple(Objective(o["start"], tuple(o["relations"])) for o in d["objectives"])
        return cls(d["task_id"], objs, tuple(d["ground_truth"]))


def _chains(graph: KnowledgeGraph, hops: int) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """All (entity path, relation path) pairs with exactly `hops` edges."""
    out = []

    def extend(ents: list[str], rels: list[str]) -> None:
        if len(rels) == hops:
            out.append((tuple(ents), tuple(rels)))
            return
        for r, o in sorted(graph.out_edges(ents[-1])):
            extend(ents + [o], rels + [r])

    for e in graph.entities:
        extend([e], [])
    return out


def generate_task(graph: KnowledgeGraph, objective_count: int, hops: int, seed: int,
                  task_id: str | None = None, attempts: int = 64) -> Task:
    """Objectives are entity-disjoint chains; ground truth comes from walking the graph."""
    if not 1 <= objective_count <= MAX_OBJECTIVES:
        raise ConfigError(f"objective_count must be in [1, {MAX_OBJECTIVES}]")
    if not 2 <= hops <= 4:
        raise ConfigError("hops must be in [2, 4]")
    if objective_count * (hops + 1) > len(graph.entities):
        raise GenerationError(
            f"{objective_count} disjoint {hops}-hop chains need {objective_count * (hops + 1)} "
            f"entities, graph has {len(graph.entities)}")
    chains = _chains(graph, hops)
    if not chains:
        raise GenerationError(f"graph has no {hops}-hop chains")
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        picked = []
        taken: set[str] = set()
        for idx in rng.permutation(len(chains)):
            ents, rels = chains[idx]
            if taken.isdisjoint(ents):
                picked.append((ents, rels))
                taken.update(ents)
                if len(picked) == objective_count:
                    break
        if len(picked) == objective_count:
            objectives = tuple(Objective(ents[0], rels) for ents, rels in picked)
            truth = tuple(graph.walk(o.start, o.relations) for o in objectives)
            return Task(task_id or f"t{seed}", objectives, truth)
    raise GenerationError(f"could not place {objective_count} disjoint {hops}-hop chains")


def fact_sentence(subject: str, relation: str, obj: str) -> str:
    return f"{subject} {relation} {obj} ."


@dataclass(frozen=True)
class ToolResult:
    content: str
    token_count: int
    resolved: bool


def _filler(rng: np.random.Generator, n_tokens: int) -> list[str]:
    """Filler sentences totalling exactly n_tokens tokens (words plus periods)."""
    sentences: list[str] = []
    left = n_tokens
    while left > 0:
        size = int(rng.integers(5, 12))
        if left - size < 2:
            size = left
        words = [FILLER_WORDS[i] for i in rng.integers(len(FILLER_WORDS), size=size - 1)]
        sentences.append(" ".join(words + ["."]) if size > 1 else ".")
        left -= size
    return sentences


def search(graph: KnowledgeGraph, subject: str, relation: str,
           noise_tokens: tuple[int, int] = DEFAULT_NOISE, seed: int | Sequence[int] = 0) -> ToolResult:
    rng = np.random.default_rng(seed)
    lo, hi = noise_tokens
    n_noise = int(rng.integers(lo, hi + 1))
    sentences = _filler(rng, n_noise)
    obj = graph.lookup(subject, relation)
    head = fact_sentence(subject, relation, obj) if obj is not None else f"no result for {subject} {relation} ."
    pos = int(rng.integers(len(sentences) + 1))
    if obj is None:
        pos = 0
    sentences.insert(pos, head)
    content = " ".join(sentences)
    return ToolResult(content, len(split(content)), obj is not None)


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def parse_answer(answer_text: str) -> list[str] | None:
    """Answer slots from 'ANSWER e1 ; e2 END' (keywords optional); None if unparsable."""
    text = normalize_answer(answer_text)
    if text.startswith("answer"):
        text = text[len("answer"):]
    text = text.strip()
    if text.endswith("end"):
        text = text[: -len("end")]
    slots = [normalize_answer(s) for s in text.split(";")]
    if not slots or any(not s for s in slots):
        return None
    return slots


def judge(answer_text: str, task: Task) -> tuple[bool, list[bool]]:
    slots = parse_answer(answer_text)
    n = task.objective_count
    if slots is None or len(slots) != n:
        return False, [False] * n
    per = [slots[i] == normalize_answer(task.ground_truth[i]) for i in range(n)]
    return all(per), per


def is_parsable(answer_text: str, task: Task) -> bool:
    slots = parse_answer(answer_text)
    return slots is not None and len(slots) == task.objective_count


def terminal_reward(outcome: str) -> float:
    if outcome == SUCCESS:
        return R_TASK
    if outcome == VIOLATION:
        return R_PEN
    if outcome == OTHER:
        return 0.0
    raise ValueError(f"unknown terminal outcome {outcome!r}")


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    n_entities: int = 60
    n_relations: int = 8
    noise_range: tuple[int, int] = DEFAULT_NOISE
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    turn_cap: int = TURN_CAP

    def __post_init__(self) -> None:
        object.__setattr__(self, "noise_range", tuple(int(x) for x in self.noise_range))
        lo, hi = self.noise_range
        if not 0 <= lo <= hi:
            raise ConfigError("noise range must satisfy 0 <= lo <= hi")
        if self.context_budget <= 0 or self.turn_cap <= 0:
            raise ConfigError("context budget and turn cap must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_range"] = list(self.noise_range)
        return d


class Environment:
    """A world plus the tool-output noise configuration."""

    def __init__(self, graph: KnowledgeGraph, noise_range: tuple[int, int] = DEFAULT_NOISE):
        self.graph = graph
        self.noise_range = tuple(noise_range)

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "Environment":
        return cls(generate_world(cfg.seed, cfg.n_entities, cfg.n_relations), cfg.noise_range)

    def search(self, subject: str, relation: str, seed) -> ToolResult:
        return search(self.graph, subject, relation, self.noise_range, seed)


def generate_tasks(graph: KnowledgeGraph, count: int, objective_counts: Iterable[int],
                   hops: Iterable[int], seed: int, prefix: str = "t") -> list[Task]:
    """`count` tasks cycling through the requested (objective_count, hops) combinations."""
    combos = [(k, h) for k in objective_counts for h in hops]
    if not combos:
        raise ConfigError("need at least one objective count and one hop count")
    tasks = []
    for i in range(count):
        k, h = combos[i % len(combos)]
        tasks.append(generate_task(graph, k, h, seed=hash_seed(seed, i), task_id=f"{prefix}{i:05d}"))
    return tasks


def hash_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts."""
    words = []
    for p in parts:
        p = int(p) & ((1 << 64) - 1)
        words += [p & 0xFFFFFFFF, p >> 32]
    lo, hi = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(lo) | (int(hi) << 32)) & ((1 << 63) - 1)


def save_tasks(tasks: Sequence[Task], path: str | Path) -> None:
    Path(path).write_text("".join(t.to_json() + "\n" for t in tasks), encoding="utf-8")


def load_tasks(path: str | Path) -> list[Task]:
    return [Task.from_json(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
