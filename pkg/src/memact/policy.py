"""Token-level linear softmax policy over hashed context features.

logits(y | H, partial) = (W[features] . values + tied[group] for each tied
indicator naming y) / temperature, restricted to the grammar-legal
continuations when sampling. Log-probabilities and their
gradients are exact, which is what the gradient checks lean on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import features as F
from .features import ContextFeatures, MemoryView
from .tokenizer import VOCAB, VOCAB_VERSION, decode

CHECKPOINT_VERSION = 1
DEFAULT_TOKEN_CAP = 64


class CheckpointMismatch(ValueError):
    pass


@dataclass
class PolicyParams:
    weights: np.ndarray  # (n_features, vocab_size), float64
    temperature: float = 1.0
    window: int = F.DEFAULT_WINDOW
    allow_memory: bool = True
    token_cap: int = DEFAULT_TOKEN_CAP
    tied: np.ndarray | None = None  # (N_TIED,), one shared weight per tied indicator group

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != len(VOCAB):
            raise ValueError(f"weights must be (n_features, {len(VOCAB)})")
        self.tied = np.zeros(F.N_TIED) if self.tied is None else np.asarray(self.tied, dtype=np.float64)
        if self.tied.shape != (F.N_TIED,):
            raise ValueError(f"tied must have shape ({F.N_TIED},)")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, n_features: int = F.DEFAULT_N_FEATURES, **kw) -> "PolicyParams":
        return cls(np.zeros((n_features, len(VOCAB))), **kw)

    @classmethod
    def random(cls, n_features: int, rng: np.random.Generator, scale: float = 1.0, **kw) -> "PolicyParams":
        w = rng.normal(0.0, scale, size=(n_features, len(VOCAB)))
        return cls(w, tied=rng.normal(0.0, scale, size=F.N_TIED), **kw)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.temperature, self.window, self.allow_memory, self.token_cap,
                            self.tied.copy())

    def meta(self) -> dict:
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "vocab_version": VOCAB_VERSION,
            "vocab_hash": VOCAB.digest(),
            "feature_dim": self.feature_dim,
            "n_tied": F.N_TIED,
            "temperature": self.temperature,
            "window": self.window,
            "allow_memory": self.allow_memory,
            "token_cap": self.token_cap,
        }

    def save(self, path, extra: dict | None = None) -> None:
        """Sparse-row checkpoint: only rows that were ever updated are stored.

        `path` may be a filename or a binary file object.
        """
        rows = np.flatnonzero(np.any(self.weights != 0.0, axis=1))
        meta = self.meta() | {"extra": extra or {}}
        arrays = dict(rows=rows, data=self.weights[rows], tied=self.tied,
                      meta=np.array(json.dumps(meta, sort_keys=True)))
        if hasattr(path, "write"):
            np.savez(path, **arrays)
            return
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path, expect_feature_dim: int | None = None) -> tuple["PolicyParams", dict]:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            rows, data, tied = z["rows"], z["data"], z["tied"]
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"checkpoint version {meta.get('checkpoint_version')} != {CHECKPOINT_VERSION}")
        if meta["vocab_hash"] != VOCAB.digest():
            raise CheckpointMismatch("vocabulary hash differs from this build")
        if expect_feature_dim is not None and meta["feature_dim"] != expect_feature_dim:
            raise CheckpointMismatch(f"feature_dim {meta['feature_dim']} != expected {expect_feature_dim}")
        if meta.get("n_tied") != F.N_TIED:
            raise CheckpointMismatch(f"checkpoint has {meta.get('n_tied')} tied weights, this build {F.N_TIED}")
        w = np.zeros((meta["feature_dim"], len(VOCAB)))
        w[rows] = data
        params = cls(w, meta["temperature"], meta["window"], meta["allow_memory"], meta["token_cap"], tied)
        return params, meta.get("extra", {})


class SparseGrad:
    """Row-sparse gradient over the weight matrix plus the dense tied part; `+` is an associative merge."""

    def __init__(self, n_features: int, rows: np.ndarray | None = None, data: np.ndarray | None = None,
                 tied: np.ndarray | None = None):
        self.n_features = n_features
        self.rows = np.zeros(0, dtype=np.int64) if rows is None else rows
        self.data = np.zeros((0, len(VOCAB))) if data is None else data
        self.tied = np.zeros(F.N_TIED) if tied is None else tied

    @classmethod
    def from_parts(cls, n_features: int, rows: list[np.ndarray], data: list[np.ndarray],
                   tied: np.ndarray | None = None) -> "SparseGrad":
        if not rows:
            return cls(n_features, tied=tied)
        r = np.concatenate(rows)
        d = np.concatenate(data, axis=0)
        order = np.argsort(r, kind="stable")
        r, d = r[order], d[order]
        uniq, starts = np.unique(r, return_index=True)
        return cls(n_features, uniq, np.add.reduceat(d, starts, axis=0), tied)

    def __add__(self, other: "SparseGrad") -> "SparseGrad":
        return SparseGrad.from_parts(self.n_features, [self.rows, other.rows], [self.data, other.data],
                                     self.tied + other.tied)

    def __mul__(self, c: float) -> "SparseGrad":
        return SparseGrad(self.n_features, self.rows.copy(), self.data * c, self.tied * c)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.data * self.data) + np.dot(self.tied, self.tied)))

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_features, len(VOCAB)))
        out[self.rows] = self.data
        return out

    def get(self, row: int, col: int) -> float:
        i = np.searchsorted(self.rows, row)
        if i < len(self.rows) and self.rows[i] == row:
            return float(self.data[i, col])
        return 0.0

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)) and np.all(np.isfinite(self.tied)))


class GradAccumulator:
    """Collects coef * d logprob / d params over many token contexts."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self.rows: list[np.ndarray] = []
        self.data: list[np.ndarray] = []
        self.tied = np.zeros(F.N_TIED)

    def add_token(self, f: ContextFeatures, token: int, legal: np.ndarray | None, coef: float) -> float:
        """Adds coef * gradient of this token's logprob; returns the logprob."""
        if legal is not None and len(legal) == 1:
            return 0.0  # forced token: logprob 0, no gradient
        p = distribution(self.params, f, legal)
        lp = math.log(p[token])
        if coef != 0.0:
            p[token] -= 1.0
            row = (-coef / self.params.temperature) * p
            if len(f.indices):
                self.rows.append(f.indices)
                self.data.append(np.outer(f.values, row))
            if len(f.tied_groups):
                np.add.at(self.tied, f.tied_groups, row[f.tied_tokens])
        return lp

    def add(self, grad: SparseGrad, weight: float = 1.0) -> None:
        if len(grad.rows):
            self.rows.append(grad.rows)
            self.data.append(weight * grad.data)
        self.tied += weight * grad.tied

    def result(self) -> SparseGrad:
        return SparseGrad.from_parts(self.params.feature_dim, self.rows, self.data, self.tied.copy())


def logits(params: PolicyParams, f: ContextFeatures) -> np.ndarray:
    z = f.values @ params.weights[f.indices]
    if len(f.tied_groups):
        np.add.at(z, f.tied_tokens, params.tied[f.tied_groups])
    return z / params.temperature


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z)
    return z - (m + np.log(np.sum(np.exp(z - m))))


def distribution(params: PolicyParams, f: ContextFeatures, legal: np.ndarray | None = None) -> np.ndarray:
    """Full-vocabulary probabilities; zero outside `legal` when given."""
    z = logits(params, f)
    if legal is None:
        return np.exp(_log_softmax(z))
    p = np.zeros(len(z))
    p[legal] = np.exp(_log_softmax(z[legal]))
    return p


def logprob(params: PolicyParams, f: ContextFeatures, token: int, legal: np.ndarray | None = None) -> float:
    z = logits(params, f)
    if legal is None:
        return float(_log_softmax(z)[token])
    pos = np.flatnonzero(legal == token)
    if len(pos) == 0:
        return float("-inf")
    if len(legal) == 1:
        return 0.0
    return float(_log_softmax(z[legal])[pos[0]])


def grad_logprob(params: PolicyParams, f: ContextFeatures, token: int,
                 legal: np.ndarray | None = None) -> SparseGrad:
    """(one_hot(token) - softmax) outer features, over 1/temperature."""
    p = distribution(params, f, legal)
    p[token] -= 1.0
    row = (-1.0 / params.temperature) * p
    tied = np.zeros(F.N_TIED)
    if len(f.tied_groups):
        np.add.at(tied, f.tied_groups, row[f.tied_tokens])
    return SparseGrad(params.feature_dim, f.indices.copy(), np.outer(f.values, row), tied)


@dataclass
class TokenContext:
    """Everything needed to score one sampled token."""

    features: ContextFeatures
    legal: np.ndarray
    token: int


def action_contexts(params: PolicyParams, memory_tokens: Sequence[int], action_tokens: Sequence[int],
                    view: MemoryView | None = None, full: bool = False) -> Iterator[TokenContext]:
    """Re-derive the (features, legal set) each action token was sampled under.

    Forced tokens (one legal continuation) get empty features unless full=True.
    """
    if view is None:
        view = F.parse_memory(memory_tokens)
    for j, tok in enumerate(action_tokens):
        partial = action_tokens[:j]
        state = F.grammar_state(partial)
        legal = F.legal_tokens(state, view, params.allow_memory)
        if len(legal) == 1 and not full:
            feats = ContextFeatures(np.zeros(0, dtype=np.int64), np.zeros(0))
        else:
            feats = F.features_from_view(view, memory_tokens, partial, state, params.feature_dim, params.window)
        yield TokenContext(feats, legal, tok)


def score_action(params: PolicyParams, memory_tokens: Sequence[int], action_tokens: Sequence[int]) -> list[float]:
    """Grammar-masked log-probabilities of an action's tokens under `params`."""
    return [logprob(params, c.features, c.token, c.legal)
            for c in action_contexts(params, memory_tokens, action_tokens)]


@dataclass
class ActionSample:
    text: str
    token_ids: list[int]
    logprobs: list[float]
    malformed: bool = False
    kind: str = field(default="")

    def __post_init__(self) -> None:
        if not self.kind:
            self.kind = "memory" if (self.token_ids and self.token_ids[0] == F.PRUNE and not self.malformed) else "task"


def _pick(p_legal: np.ndarray, rng: np.random.Generator | None) -> int:
    if rng is None:
        return int(np.argmax(p_legal))
    c = np.cumsum(p_legal)
    u = rng.random() * c[-1]
    return int(min(np.searchsorted(c, u, side="right"), len(c) - 1))


def sample_action(params: PolicyParams, memory, rng: np.random.Generator | None,
                  greedy: bool = False) -> ActionSample:
    """Autoregressive grammar-constrained sampling; greedy=True takes the argmax."""
    memory_tokens = memory.token_ids() if hasattr(memory, "token_ids") else list(memory)
    view = F.parse_memory(memory_tokens)
    partial: list[int] = []
    lps: list[float] = []
    while True:
        state = F.grammar_state(partial)
        if state.slot == F.DONE:
            return ActionSample(decode(partial), partial, lps)
        if len(partial) >= params.token_cap:
            return ActionSample(decode(partial), partial, lps, malformed=True)
        legal = F.legal_tokens(state, view, params.allow_memory)
        if len(legal) == 1:
            partial.append(int(legal[0]))
            lps.append(0.0)
            continue
        feats = F.features_from_view(view, memory_tokens, partial, state, params.feature_dim, params.window)
        z = logits(params, feats)[legal]
        logp = _log_softmax(z)
        k = _pick(np.exp(logp), None if greedy else rng)
        partial.append(int(legal[k]))
        lps.append(float(logp[k]))
