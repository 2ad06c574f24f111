"""Action grammar and hashed context features for the linear policy.

Everything here is a pure function of the memory's token ids plus the
partial action sampled so far, which is what makes replay and segment
reconstruction exact.

Feature groups:
  * unigrams and bigrams of the last ``window`` tokens of memory + partial
    action (not conjoined with the grammar slot), inside an action only;
  * slot-conjoined structural indicators read off the parsed memory:
    token-count bucket, open objectives, raw tool outputs, the last record's
    role, and candidate record ids for a PRUNE;
  * one shared "target" indicator naming the token that would make progress
    in the current slot (next search subject or relation, the resolved answer,
    the next token of the facts held by the records being pruned).

Besides the hashed vector, a context carries tied indicators: (group, token)
pairs that add one shared weight per group to the named token's logit. They
let "emit the target" be learned once for every entity, relation and record
id instead of once per token.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import (
    ENTITY_POOL, FILLER_WORDS, IS_ENTITY, IS_ID, IS_RELATION, NEWLINE, RELATION_POOL, VOCAB,
)

_ix = VOCAB.index
NL = _ix[NEWLINE]
SEARCH, ANSWER, PRUNE, IDS, END = (_ix[s] for s in ("SEARCH", "ANSWER", "PRUNE", "ids", "END"))
SUMMARY_KW = _ix["summary"]
EQ, COMMA, SEMI, PERIOD, COLON, QMARK = (_ix[s] for s in ("=", ",", ";", ".", ":", "?"))
QUESTION = _ix["question"]
FAIL, ERROR = _ix["fail"], _ix["error"]

ROLE_IDS = {_ix[r]: r for r in ("instruction", "task_action", "observation", "memory_action",
                                  "memory_outcome", "summary")}
R_INSTRUCTION, R_TASK, R_OBS, R_MEMACT, R_OUTCOME, R_SUMMARY = (
    _ix[r] for r in ("instruction", "task_action", "observation", "memory_action", "memory_outcome", "summary"))

ENTITY_IDS = VOCAB.ids_of(ENTITY_POOL)
RELATION_IDS = VOCAB.ids_of(RELATION_POOL)
TEXT_IDS = np.array(sorted(set(ENTITY_IDS) | set(RELATION_IDS) | set(VOCAB.ids_of(FILLER_WORDS)) | {PERIOD, END}),
                    dtype=np.int64)

# grammar slots
(START, S_SUBJ, S_REL, A_ENT, A_SEP, P_IDS, P_EQ1, P_ID, P_SEP, P_EQ2, P_TEXT, DONE) = range(12)
SLOT_NAMES = ("START", "S_SUBJ", "S_REL", "A_ENT", "A_SEP", "P_IDS", "P_EQ1", "P_ID", "P_SEP",
              "P_EQ2", "P_TEXT", "DONE")

# structural feature kinds
(K_BIAS, K_TOKBUCKET, K_UNRES, K_RAW, K_LASTROLE, K_LASTFAIL, K_TARGET, K_NOTFRONTIER,
 K_ANS_OPEN, K_MORE, K_FULL, K_CAND, K_MORE_RAW, K_NONE_LEFT, K_SUMDONE, K_SUMOFF, K_STATE) = range(17)

# tied indicator groups
T_SUBJ, T_REL, T_ANS, T_SUM, T_RAWID = range(5)
N_TIED = 5

_UNIGRAM, _BIGRAM, _STRUCT = 1, 2, 3
TOKEN_BUCKET = 250

DEFAULT_N_FEATURES = 1 << 16
DEFAULT_WINDOW = 8
NGRAM_WEIGHT = 0.25


@dataclass
class GrammarState:
    slot: int
    answer_slot: int = 0  # entities already emitted in an ANSWER
    listed: tuple[int, ...] = ()  # ids already named in a PRUNE
    summary: tuple[int, ...] = ()  # summary tokens emitted so far
    subject: int = -1  # SEARCH subject, once chosen


def grammar_state(partial: Sequence[int]) -> GrammarState:
    """Parse a partial action. Assumes the partial was produced under the grammar."""
    if not partial:
        return GrammarState(START)
    head = partial[0]
    n = len(partial)
    if head == SEARCH:
        return GrammarState((S_SUBJ, S_REL, DONE)[min(n - 1, 2)], subject=partial[1] if n > 1 else -1)
    if head == ANSWER:
        k = sum(1 for t in partial[1:] if t != SEMI and t != END)
        last = partial[-1]
        if last == END:
            return GrammarState(DONE, answer_slot=k)
        if last == ANSWER or last == SEMI:
            return GrammarState(A_ENT, answer_slot=k)
        return GrammarState(A_SEP, answer_slot=k)
    if head == PRUNE:
        slot = P_IDS
        listed: list[int] = []
        summary: list[int] = []
        for t in partial[1:]:
            if slot == P_IDS:
                slot = P_EQ1
            elif slot == P_EQ1:
                slot = P_ID
            elif slot == P_ID:
                listed.append(t)
                slot = P_SEP
            elif slot == P_SEP:
                slot = P_ID if t == COMMA else P_EQ2
            elif slot == P_EQ2:
                slot = P_TEXT
            elif slot == P_TEXT:
                if t == END:
                    slot = DONE
                else:
                    summary.append(t)
            else:
                raise ValueError("tokens after a complete action")
        return GrammarState(slot, listed=tuple(listed), summary=tuple(summary))
    raise ValueError(f"partial action starts with non-keyword token {head}")


@dataclass
class Record:
    role: int
    rid: int
    content: tuple[int, ...]
    facts: tuple[tuple[int, int, int], ...] = ()


@dataclass
class MemoryView:
    """Structural parse of a serialized memory's token ids."""

    records: list[Record]
    total_tokens: int
    objectives: list[tuple[int, tuple[int, ...]]]
    facts: dict[tuple[int, int], int]
    searched: set[tuple[int, int]]
    # per objective: ("resolved", answer) or ("open", (subject, relation))
    status: list[tuple[str, object]]

    @property
    def live_ids(self) -> np.ndarray:
        return np.array([r.rid for r in self.records], dtype=np.int64)

    @property
    def open_frontiers(self) -> list[tuple[int, int]]:
        return [v for k, v in self.status if k == "open"]  # type: ignore[misc]

    def role_of(self, rid: int) -> int | None:
        for r in self.records:
            if r.rid == rid:
                return r.role
        return None


def facts_in(content: Sequence[int]) -> list[tuple[int, int, int]]:
    out = []
    for i in range(len(content) - 2):
        a, b, c = content[i], content[i + 1], content[i + 2]
        if IS_ENTITY[a] and IS_RELATION[b] and IS_ENTITY[c]:
            out.append((a, b, c))
    return out


def parse_memory(tokens: Sequence[int]) -> MemoryView:
    records: list[Record] = []
    start = 0
    n = len(tokens)
    for i in range(n):
        if tokens[i] == NL:
            line = tokens[start:i]
            if len(line) >= 3:
                content = tuple(line[3:])
                facts = tuple(facts_in(content)) if line[0] in (R_OBS, R_SUMMARY) else ()
                records.append(Record(line[0], line[1], content, facts))
            start = i + 1
    objectives: list[tuple[int, tuple[int, ...]]] = []
    if records and records[0].role == R_INSTRUCTION:
        c = records[0].content
        i = 0
        while i < len(c):
            if c[i] == QUESTION and i + 3 < len(c) and c[i + 2] == COLON:
                j = i + 4
                rels = []
                while j < len(c) and IS_RELATION[c[j]]:
                    rels.append(c[j])
                    j += 1
                objectives.append((c[i + 3], tuple(rels)))
                i = j
            else:
                i += 1
    facts: dict[tuple[int, int], int] = {}
    searched: set[tuple[int, int]] = set()
    for r in records:
        if r.role == R_OBS or r.role == R_SUMMARY:
            for a, b, c in r.facts:
                facts.setdefault((a, b), c)
        elif r.role == R_TASK and len(r.content) == 3 and r.content[0] == SEARCH:
            searched.add((r.content[1], r.content[2]))
    status: list[tuple[str, object]] = []
    for start_ent, rels in objectives:
        cur = start_ent
        for rel in rels:
            nxt = facts.get((cur, rel))
            if nxt is None:
                status.append(("open", (cur, rel)))
                break
            cur = nxt
        else:
            status.append(("resolved", cur))
    return MemoryView(records, n, objectives, facts, searched, status)


def prune_candidates(view: MemoryView, listed: Sequence[int] = ()) -> np.ndarray:
    """Ids a PRUNE may still name: live, not the instruction, not already listed."""
    taken = set(listed)
    return np.array([r.rid for r in view.records if r.role != R_INSTRUCTION and r.rid not in taken],
                    dtype=np.int64)


def legal_tokens(state: GrammarState, view: MemoryView, allow_memory: bool = True) -> np.ndarray:
    s = state.slot
    if s == START:
        can_prune = allow_memory and len(view.records) > 1
        return np.array([SEARCH, ANSWER, PRUNE] if can_prune else [SEARCH, ANSWER], dtype=np.int64)
    if s == S_SUBJ or s == A_ENT:
        return ENTITY_IDS
    if s == S_REL:
        return RELATION_IDS
    if s == A_SEP:
        return np.array([SEMI, END], dtype=np.int64)
    if s == P_IDS:
        return np.array([IDS], dtype=np.int64)
    if s == P_EQ1 or s == P_EQ2:
        return np.array([EQ], dtype=np.int64)
    if s == P_ID:
        return prune_candidates(view, state.listed)
    if s == P_SEP:
        if len(prune_candidates(view, state.listed)):
            return np.array([COMMA, SUMMARY_KW], dtype=np.int64)
        return np.array([SUMMARY_KW], dtype=np.int64)
    if s == P_TEXT:
        return TEXT_IDS
    raise ValueError("no legal continuation of a complete action")


def pruned_fact_tokens(view: MemoryView, listed: Sequence[int]) -> list[int]:
    """Fact sentences held by the records named for pruning, in memory order."""
    chosen = set(listed)
    out: list[int] = []
    for r in view.records:
        if r.rid in chosen:
            for a, b, c in r.facts:
                out.extend((a, b, c, PERIOD))
    return out


def _target(token: int) -> tuple[int, ...]:
    # not slot-conjoined: one "emit this token now" weight per token, shared by
    # search subjects and relations, answer slots and summary text
    return (-1, K_TARGET, token)


def structural_keys(state: GrammarState, view: MemoryView) -> list[tuple[int, ...]]:
    s = state.slot
    keys: list[tuple[int, ...]] = [(s, K_BIAS)]
    if s == START:
        n_open = len(view.open_frontiers)
        raw = sum(1 for r in view.records if r.role == R_OBS)
        last = view.records[-1] if view.records else None
        # every keyword key is split on whether an objective is still open, so
        # punishing early answers cannot leak into the all-resolved state
        is_open = int(n_open > 0 or not view.objectives)
        keys = [(s, K_BIAS, is_open)]
        keys.append((s, K_TOKBUCKET, is_open, min(view.total_tokens // TOKEN_BUCKET, 15)))
        keys.append((s, K_UNRES, min(n_open, 4)))
        keys.append((s, K_RAW, is_open, min(raw, 3)))
        last_role = -1
        if last is not None:
            last_role = last.role
            keys.append((s, K_LASTROLE, is_open, last.role))
            if last.content and last.content[0] in (FAIL, ERROR):
                keys.append((s, K_LASTFAIL, is_open))
        keys.append((s, K_STATE, is_open, int(raw > 0), last_role))
    elif s == S_SUBJ:
        frontiers = view.open_frontiers
        if frontiers:
            keys.append(_target(frontiers[0][0]))
        else:
            keys.append((s, K_NOTFRONTIER))
    elif s == S_REL:
        rels = [rel for subj, rel in view.open_frontiers if subj == state.subject]
        if rels:
            keys.append(_target(rels[0]))
        else:
            keys.append((s, K_NOTFRONTIER))
    elif s == A_ENT:
        k = state.answer_slot
        if k < len(view.status) and view.status[k][0] == "resolved":
            keys.append(_target(view.status[k][1]))  # type: ignore[arg-type]
        else:
            keys.append((s, K_ANS_OPEN))
    elif s == A_SEP:
        keys.append((s, K_MORE) if state.answer_slot < len(view.objectives) else (s, K_FULL))
    elif s == P_ID:
        listed = set(state.listed)
        for r in view.records:
            if r.role != R_INSTRUCTION and r.rid not in listed:
                keys.append((s, K_CAND, int(r.role in (R_TASK, R_OBS)), r.rid))
    elif s == P_SEP:
        listed = set(state.listed)
        more = any(r.rid not in listed for r in view.records if r.role in (R_TASK, R_OBS))
        keys.append((s, K_MORE_RAW) if more else (s, K_NONE_LEFT))
    elif s == P_TEXT:
        target = pruned_fact_tokens(view, state.listed)
        done = state.summary
        m = len(done)
        if tuple(target[:m]) != done:
            keys.append((s, K_SUMOFF))
        elif m < len(target):
            keys.append(_target(target[m]))
        else:
            keys.append((s, K_SUMDONE))
    return keys


def tied_indicators(state: GrammarState, view: MemoryView) -> list[tuple[int, int]]:
    """(group, token) pairs whose logits get the group's tied weight."""
    s = state.slot
    if s == S_SUBJ:
        frontiers = view.open_frontiers
        return [(T_SUBJ, frontiers[0][0])] if frontiers else []
    if s == S_REL:
        rels = [rel for subj, rel in view.open_frontiers if subj == state.subject]
        return [(T_REL, rels[0])] if rels else []
    if s == A_ENT:
        k = state.answer_slot
        if k < len(view.status) and view.status[k][0] == "resolved":
            return [(T_ANS, view.status[k][1])]  # type: ignore[list-item]
        return []
    if s == P_ID:
        listed = set(state.listed)
        return [(T_RAWID, r.rid) for r in view.records
                if r.role in (R_TASK, R_OBS) and r.rid not in listed]
    if s == P_TEXT:
        target = pruned_fact_tokens(view, state.listed)
        m = len(state.summary)
        if tuple(target[:m]) != state.summary:
            return []
        return [(T_SUM, target[m] if m < len(target) else END)]
    return []


_MASK64 = (1 << 64) - 1


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stable_hash(key: tuple[int, ...]) -> int:
    h = 0x243F6A8885A308D3
    for v in key:
        h = _splitmix(h ^ (v & _MASK64))
    return h


class FeatureHasher:
    """Maps integer feature keys to slots in [0, n_features) with a memo table."""

    def __init__(self, n_features: int):
        self.n_features = int(n_features)
        self._memo: dict[tuple[int, ...], int] = {}

    def __call__(self, key: tuple[int, ...]) -> int:
        idx = self._memo.get(key)
        if idx is None:
            idx = stable_hash(key) % self.n_features
            self._memo[key] = idx
        return idx


_HASHERS: dict[int, FeatureHasher] = {}


def hasher_for(n_features: int) -> FeatureHasher:
    h = _HASHERS.get(n_features)
    if h is None:
        h = _HASHERS[n_features] = FeatureHasher(n_features)
    return h


def ngram_keys(memory_tokens: Sequence[int], partial: Sequence[int], window: int) -> list[tuple[int, ...]]:
    if window <= 0:
        return []
    tail = list(partial[-window:])
    if len(tail) < window:
        need = window - len(tail)
        tail = list(memory_tokens[-need:]) + tail if need <= len(memory_tokens) else list(memory_tokens) + tail
    keys: list[tuple[int, ...]] = [(_UNIGRAM, t) for t in tail]
    keys.extend((_BIGRAM, a, b) for a, b in zip(tail, tail[1:]))
    return keys


_NO_INTS = np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class ContextFeatures:
    """Sparse, L2-normalised feature vector (sorted unique indices) plus tied indicators."""

    indices: np.ndarray
    values: np.ndarray
    tied_groups: np.ndarray = _NO_INTS
    tied_tokens: np.ndarray = _NO_INTS

    def dense(self, n_features: int) -> np.ndarray:
        out = np.zeros(n_features)
        out[self.indices] = self.values
        return out

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))


def _vectorize(idx: list[int], weights: list[float], tied: Sequence[tuple[int, int]] = ()) -> ContextFeatures:
    groups = np.array([g for g, _ in tied], dtype=np.int64)
    tokens = np.array([t for _, t in tied], dtype=np.int64)
    if not idx:
        return ContextFeatures(_NO_INTS, np.zeros(0), groups, tokens)
    acc: dict[int, float] = {}
    for i, w in zip(idx, weights):
        acc[i] = acc.get(i, 0.0) + w
    keys = sorted(acc)
    values = np.array([acc[k] for k in keys])
    values /= np.sqrt(np.dot(values, values))
    return ContextFeatures(np.array(keys, dtype=np.int64), values, groups, tokens)


def features_from_view(view: MemoryView, memory_tokens: Sequence[int], partial: Sequence[int],
                       state: GrammarState, n_features: int = DEFAULT_N_FEATURES,
                       window: int = DEFAULT_WINDOW, structural: bool = True) -> ContextFeatures:
    hasher = hasher_for(n_features)
    # the keyword choice depends on task state the window cannot see, so it
    # reads structural features only
    keys = ngram_keys(memory_tokens, partial, window) if state.slot != START or not structural else []
    idx = [hasher(k) for k in keys]
    weights = [NGRAM_WEIGHT] * len(idx)
    tied: list[tuple[int, int]] = []
    if structural:
        skeys = structural_keys(state, view)
        idx.extend(hasher((_STRUCT,) + k) for k in skeys)
        weights.extend([1.0] * len(skeys))
        tied = tied_indicators(state, view)
    return _vectorize(idx, weights, tied)


def featurize(memory_tokens: Sequence[int], partial_action: Sequence[int],
              n_features: int = DEFAULT_N_FEATURES, window: int = DEFAULT_WINDOW,
              structural: bool = True) -> ContextFeatures:
    view = parse_memory(memory_tokens)
    return features_from_view(view, memory_tokens, partial_action, grammar_state(partial_action),
                              n_features, window, structural)


def corpus_ngram_keys(texts: Sequence[Sequence[int]]) -> set[tuple[int, ...]]:
    """Distinct unigram and bigram keys occurring in a token corpus."""
    keys: set[tuple[int, ...]] = set()
    for toks in texts:
        keys.update((_UNIGRAM, t) for t in toks)
        keys.update((_BIGRAM, a, b) for a, b in zip(toks, toks[1:]))
    return keys


def collision_rate(keys: set[tuple[int, ...]], n_features: int) -> float:
    """Fraction of distinct keys sharing their hash slot with another key."""
    if not keys:
        return 0.0
    slots: dict[int, int] = {}
    for k in keys:
        i = stable_hash(k) % n_features
        slots[i] = slots.get(i, 0) + 1
    clashing = sum(c for c in slots.values() if c > 1)
    return clashing / len(keys)


def is_id_token(t: int) -> bool:
    return bool(IS_ID[t])
