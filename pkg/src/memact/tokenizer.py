"""Whitespace + punctuation tokenizer over a closed, versioned vocabulary.

Every length used downstream (token budgets, prefix masks, segment spans) is
measured with this tokenizer, so it has to be bit-exact and boring.

Splitting rule: whitespace separates words, a newline is kept as its own
token (it terminates a serialized memory record), and every punctuation
character becomes a single-character token. Word characters are letters,
digits and underscore.
"""
from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

VOCAB_VERSION = 1

UNK = "<unk>"
NEWLINE = "\n"
_NEWLINE_ESCAPE = "<nl>"

_TOKEN_RE = re.compile(r"\n|\w+|[^\w\s]")

PUNCTUATION = (".", ",", ";", ":", "=", "?", "!", "-", "(", ")")
ROLES = ("instruction", "task_action", "observation", "memory_action", "memory_outcome", "summary")
# action grammar keywords; "summary" doubles as a role name
KEYWORDS = ("SEARCH", "ANSWER", "PRUNE", "ids", "END")
MESSAGE_WORDS = (
    "answer", "every", "question", "in", "order", "with", "ok", "fail", "error",
    "malformed", "action", "no", "result", "for", "unknown", "protected", "duplicate",
    "id", "removed", "records", "net", "tokens",
)
NUMBERS = tuple(str(i) for i in range(100))

_PREFIXES = ("Ka", "Bo", "Mi", "Te", "Ru", "Sa", "Vo", "Li", "Da", "Ne", "Po", "Gu")
_SUFFIXES = ("dor", "mel", "rin", "vak", "lune", "thas", "pek", "zio")
ENTITY_POOL = tuple(p + s for p in _PREFIXES for s in _SUFFIXES)

RELATION_POOL = (
    "parent", "mentor", "rival", "employer", "founder", "neighbor",
    "author", "owner", "sponsor", "partner", "successor", "advisor",
)

FILLER_WORDS = (
    "the", "a", "of", "report", "notes", "archive", "was", "said", "it", "local",
    "market", "weather", "later", "many", "people", "old", "river", "town",
    "songs", "season", "quiet", "street", "near", "seen",
)

ID_POOL_SIZE = 128
ID_LENGTH = 6
_ID_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"
_ID_POOL_SEED = 20250101


def _build_id_pool() -> tuple[str, ...]:
    rng = random.Random(_ID_POOL_SEED)
    taken = set(ENTITY_POOL) | set(RELATION_POOL) | set(FILLER_WORDS) | set(MESSAGE_WORDS)
    pool: list[str] = []
    while len(pool) < ID_POOL_SIZE:
        handle = "".join(rng.choice(_ID_ALPHABET) for _ in range(ID_LENGTH))
        # at least one letter and one digit, so a handle never reads as a number or word
        if handle in taken or handle.isdigit() or handle.isalpha():
            continue
        taken.add(handle)
        pool.append(handle)
    return tuple(pool)


ID_POOL = _build_id_pool()


class Token(NamedTuple):
    id: int
    surface: str


@dataclass(frozen=True)
class Vocabulary:
    """Closed surface-form <-> id map. Line number in the persisted file is the id."""

    surfaces: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {s: i for i, s in enumerate(self.surfaces)}
        if len(index) != len(self.surfaces):
            raise ValueError("vocabulary surfaces must be unique")
        if UNK not in index:
            raise ValueError("vocabulary needs an UNK entry")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.surfaces)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def id_of(self, surface: str) -> int:
        return self.index.get(surface, self.index[UNK])

    def ids_of(self, surfaces: Iterable[str]) -> np.ndarray:
        return np.array([self.index[s] for s in surfaces], dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.surfaces:
            h.update(s.encode("utf-8") + b"\x00")
        return h.hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        lines = [_NEWLINE_ESCAPE if s == NEWLINE else s for s in self.surfaces]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(tuple(NEWLINE if s == _NEWLINE_ESCAPE else s for s in lines))


def build_vocabulary() -> Vocabulary:
    groups = (
        (UNK, NEWLINE), PUNCTUATION, ROLES, KEYWORDS, MESSAGE_WORDS, NUMBERS,
        ENTITY_POOL, RELATION_POOL, FILLER_WORDS, ID_POOL,
    )
    seen: dict[str, None] = {}
    for group in groups:
        for s in group:
            seen.setdefault(s, None)
    return Vocabulary(tuple(seen))


VOCAB = build_vocabulary()
VOCAB_FILE = Path(__file__).parent / "data" / f"vocab_v{VOCAB_VERSION}.txt"


def split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> list[Token]:
    index, unk = vocab.index, vocab.unk_id
    return [Token(index.get(s, unk), s) for s in _TOKEN_RE.findall(text)]


def encode(text: str, vocab: Vocabulary = VOCAB) -> list[int]:
    index, unk = vocab.index, vocab.unk_id
    return [index.get(s, unk) for s in _TOKEN_RE.findall(text)]


def detokenize(tokens: Sequence[Token] | Sequence[str]) -> str:
    """Canonical text: single spaces between tokens, no spaces around newlines."""
    out: list[str] = []
    prev_newline = True
    for tok in tokens:
        s = tok.surface if isinstance(tok, Token) else tok
        if s == NEWLINE:
            out.append(NEWLINE)
            prev_newline = True
            continue
        if not prev_newline:
            out.append(" ")
        out.append(s)
        prev_newline = False
    return "".join(out)


def canonical(text: str) -> str:
    return detokenize(split(text))


def decode(ids: Iterable[int], vocab: Vocabulary = VOCAB) -> str:
    return detokenize([vocab.surfaces[i] for i in ids])


def count_tokens(memory) -> int:
    """Token length of a working memory's canonical serialization.

    Accepts a WorkingMemory, or any iterable of records (an empty one gives 0).
    """
    if hasattr(memory, "serialize"):
        text = memory.serialize()
    else:
        text = "".join(r.line for r in memory)
    return len(split(text))


def _class_mask(surfaces: Iterable[str], vocab: Vocabulary = VOCAB) -> np.ndarray:
    mask = np.zeros(len(vocab), dtype=bool)
    mask[vocab.ids_of(surfaces)] = True
    return mask


IS_ENTITY = _class_mask(ENTITY_POOL)
IS_RELATION = _class_mask(RELATION_POOL)
IS_ID = _class_mask(ID_POOL)
IS_FILLER = _class_mask(FILLER_WORDS)
