"""Working memory: an ordered, editable sequence of id-tagged records.

Task actions extend the memory; memory actions (PRUNE) rewrite it in place,
which is exactly what breaks the append-only prefix property.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokenizer import ID_POOL, NEWLINE, canonical, encode, split

ROLES = ("instruction", "task_action", "observation", "memory_action", "memory_outcome", "summary")
PRUNABLE_ROLES = frozenset(ROLES) - {"instruction"}


class IdExhaustedError(RuntimeError):
    pass


class IdSource:
    """Seeded record-id generator; never hands out the same id twice.

    Ids are 6-character base-36 handles drawn from the fixed id pool that is
    part of the vocabulary, so the policy can emit them as single tokens.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        self._rng = np.random.default_rng(seed)
        self._issued: set[str] = set()

    def __call__(self) -> str:
        if len(self._issued) >= len(ID_POOL):
            raise IdExhaustedError(f"all {len(ID_POOL)} record ids used in this trajectory")
        while True:
            handle = ID_POOL[int(self._rng.integers(len(ID_POOL)))]
            if handle not in self._issued:
                self._issued.add(handle)
                return handle

    @property
    def issued(self) -> frozenset[str]:
        return frozenset(self._issued)


@dataclass(frozen=True)
class Record:
    id: str
    role: str
    content: str
    token_ids: tuple[int, ...] = field(repr=False, compare=False)

    @classmethod
    def make(cls, rid: str, role: str, content: str) -> "Record":
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        content = canonical(content)
        line = cls.line_for(rid, role, content)
        return cls(rid, role, content, tuple(encode(line)))

    @staticmethod
    def line_for(rid: str, role: str, content: str) -> str:
        body = f"{role} {rid} : {content}" if content else f"{role} {rid} :"
        return body + NEWLINE

    @property
    def line(self) -> str:
        return self.line_for(self.id, self.role, self.content)

    @property
    def token_count(self) -> int:
        return len(self.token_ids)

    @property
    def content_ids(self) -> tuple[int, ...]:
        # header is "<role> <id> :", trailer is the newline
        return self.token_ids[3:-1]


@dataclass(frozen=True)
class MemoryEdit:
    summary: str
    ids_to_prune: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids_to_prune", tuple(self.ids_to_prune))

    def render(self) -> str:
        ids = " , ".join(self.ids_to_prune)
        summary = canonical(self.summary)
        return f"PRUNE ids = {ids} summary = {summary} END" if summary else f"PRUNE ids = {ids} summary = END"


@dataclass(frozen=True)
class WorkingMemory:
    records: tuple[Record, ...]

    def __post_init__(self) -> None:
        if not self.records or self.records[0].role != "instruction":
            raise ValueError("working memory must start with the instruction record")

    @classmethod
    def start(cls, instruction: str, id_source: IdSource) -> "WorkingMemory":
        return cls((Record.make(id_source(), "instruction", instruction),))

    @property
    def total_tokens(self) -> int:
        return sum(r.token_count for r in self.records)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, rid: str) -> Record | None:
        for r in self.records:
            if r.id == rid:
                return r
        return None

    def serialize(self) -> str:
        return "".join(r.line for r in self.records)

    def token_ids(self) -> list[int]:
        out: list[int] = []
        for r in self.records:
            out.extend(r.token_ids)
        return out

    def export(self) -> str:
        """One record per line: role, id, token_count, content (tab separated)."""
        return "".join(f"{r.role}\t{r.id}\t{r.token_count}\t{r.content}\n" for r in self.records)

    def with_records(self, records) -> "WorkingMemory":
        return WorkingMemory(tuple(records))


def append(memory: WorkingMemory, action_text: str, observation_text: str, id_source: IdSource) -> WorkingMemory:
    """Task transition: H <- H + (a, o)."""
    action = Record.make(id_source(), "task_action", action_text)
    observation = Record.make(id_source(), "observation", observation_text)
    return WorkingMemory(memory.records + (action, observation))


def validate_edit(memory: WorkingMemory, edit: MemoryEdit) -> list[str]:
    """Problems that make an edit inapplicable; empty when the edit is valid."""
    problems: list[str] = []
    if not edit.ids_to_prune:
        problems.append("no ids")
    seen: set[str] = set()
    for rid in edit.ids_to_prune:
        rec = memory.get(rid)
        if rid in seen:
            problems.append(f"duplicate id {rid}")
        elif rec is None:
            problems.append(f"unknown id {rid}")
        elif rec.role == "instruction":
            problems.append(f"protected id {rid}")
        seen.add(rid)
    return problems


def apply_edit(
    memory: WorkingMemory,
    edit: MemoryEdit,
    id_source: IdSource,
    action_text: str | None = None,
) -> tuple[WorkingMemory, str]:
    """Memory transition H <- a(H), then append the (action, outcome) pair.

    All-or-nothing: an invalid id leaves every existing record untouched and
    the outcome reports the offending ids.
    """
    if action_text is None:
        action_text = edit.render()
    problems = validate_edit(memory, edit)
    if problems:
        outcome = "fail " + " , ".join(problems)
        records = memory.records
    else:
        doomed = set(edit.ids_to_prune)
        removed = sum(r.token_count for r in memory.records if r.id in doomed)
        summary = Record.make(id_source(), "summary", edit.summary)
        records_list: list[Record] = []
        placed = False
        for r in memory.records:
            if r.id in doomed:
                if not placed:
                    records_list.append(summary)
                    placed = True
                continue
            records_list.append(r)
        records = tuple(records_list)
        delta = summary.token_count - removed
        sign = "-" if delta < 0 else ""
        outcome = f"ok removed {len(doomed)} records net {sign} {abs(delta)} tokens"
    pair = (
        Record.make(id_source(), "memory_action", action_text),
        Record.make(id_source(), "memory_outcome", outcome),
    )
    return WorkingMemory(records + pair), canonical(outcome)


def serialize(memory: WorkingMemory) -> str:
    return memory.serialize()


def parse_serialized(text: str) -> list[tuple[str, str, str]]:
    """Inverse of serialize: (role, id, content) per record line."""
    out = []
    for line in text.split(NEWLINE):
        if not line:
            continue
        parts = split(line)
        if len(parts) < 3 or parts[2] != ":":
            raise ValueError(f"malformed record line {line!r}")
        out.append((parts[0], parts[1], line.split(":", 1)[1].strip()))
    return out
