"""Cut trajectories at memory actions into segments that share one prefix.

Segment i of a trajectory with memory actions at t_1 < ... < t_K covers the
steps (t_i, t_{i+1}] with t_0 = 0 and t_{K+1} = T. Its prefix is the working
memory right after step t_i; every token the policy sampled inside the
segment was sampled under that prefix plus records appended earlier in the
same segment, so the context can be rebuilt exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .policy import PolicyParams, TokenContext, action_contexts, logprob
from .rollout import Trajectory
from .tokenizer import encode

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


@dataclass
class Segment:
    trajectory_id: str
    prompt_id: str
    segment_index: int
    prefix_tokens: list[int]
    generated_tokens: list[int]
    mask: np.ndarray  # over prefix_tokens + generated_tokens
    per_token_step_map: list[int]
    steps: list[int]  # step indices covered, in order
    step_spans: list[tuple[int, int]]  # [start, end) into generated_tokens, per covered step
    inserts: list[list[int]]  # tokens appended to memory after each covered step
    recorded_logprobs: list[float] = field(default_factory=list)

    @property
    def input_ids(self) -> list[int]:
        return self.prefix_tokens + self.generated_tokens

    @property
    def n_generated(self) -> int:
        return len(self.generated_tokens)

    def step_memory(self, k: int) -> list[int]:
        """Memory tokens the k-th covered step was sampled under."""
        out = list(self.prefix_tokens)
        for ins in self.inserts[:k]:
            out.extend(ins)
        return out

    def to_record(self) -> dict:
        return {
            "type": "segment", "trajectory_id": self.trajectory_id, "prompt_id": self.prompt_id,
            "segment_index": self.segment_index, "steps": self.steps,
            "prefix_tokens": self.prefix_tokens, "generated_tokens": self.generated_tokens,
            "mask": self.mask.astype(int).tolist(), "per_token_step_map": self.per_token_step_map,
            "step_spans": [list(s) for s in self.step_spans], "inserts": self.inserts,
            "recorded_logprobs": self.recorded_logprobs,
        }

    @classmethod
    def from_record(cls, d: dict) -> "Segment":
        return cls(d["trajectory_id"], d["prompt_id"], d["segment_index"], d["prefix_tokens"],
                   d["generated_tokens"], np.array(d["mask"], dtype=np.int8), d["per_token_step_map"],
                   d["steps"], [tuple(s) for s in d["step_spans"]], d["inserts"], d["recorded_logprobs"])

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def boundaries(trajectory: Trajectory) -> list[tuple[int, int]]:
    """(t_i, t_{i+1}] pairs with t_0 = 0 and t_{K+1} = T."""
    cuts = [0] + trajectory.memory_action_indices + [trajectory.T]
    return list(zip(cuts[:-1], cuts[1:]))


def segment(trajectory: Trajectory) -> list[Segment]:
    steps = trajectory.steps
    if not steps:
        return []
    by_t = {s.t: s for s in steps}
    out: list[Segment] = []
    for i, (lo, hi) in enumerate(boundaries(trajectory)):
        # prefix H_{t_i}: memory after step lo == memory before step lo + 1
        prefix_text = by_t[lo + 1].pre_snapshot if lo + 1 in by_t else trajectory.final_snapshot
        prefix = encode(prefix_text)
        gen: list[int] = []
        step_map: list[int] = []
        spans: list[tuple[int, int]] = []
        inserts: list[list[int]] = []
        lps: list[float] = []
        covered = list(range(lo + 1, hi + 1))
        for t in covered:
            st = by_t[t]
            start = len(gen)
            gen.extend(st.token_ids)
            lps.extend(st.logprobs)
            step_map.extend([t] * len(st.token_ids))
            spans.append((start, len(gen)))
            inserts.append(encode(st.appended))
        mask = np.concatenate([np.zeros(len(prefix), dtype=np.int8), np.ones(len(gen), dtype=np.int8)])
        out.append(Segment(trajectory.traj_id, trajectory.prompt_id, i, prefix, gen, mask, step_map,
                           covered, spans, inserts, lps))
    return out


def token_contexts(seg: Segment, params: PolicyParams, full: bool = False) -> Iterator[TokenContext]:
    """Contexts of all mask-1 tokens, rebuilt from the prefix and in-segment appends."""
    for k, (a, b) in enumerate(seg.step_spans):
        yield from action_contexts(params, seg.step_memory(k), seg.generated_tokens[a:b], full=full)


def context_matches_snapshots(seg: Segment, trajectory: Trajectory) -> bool:
    """Rebuilt per-step memory equals the tokenized stored snapshot for every covered step."""
    by_t = {s.t: s for s in trajectory.steps}
    return all(seg.step_memory(k) == encode(by_t[t].pre_snapshot) for k, t in enumerate(seg.steps))


def fidelity_errors(seg: Segment, params: PolicyParams) -> np.ndarray:
    """|recomputed - recorded| log-probability per generated token."""
    got = [logprob(params, c.features, c.token, c.legal) for c in token_contexts(seg, params)]
    return np.abs(np.array(got) - np.array(seg.recorded_logprobs))


def round_robin_sample(segment_pools: Sequence[Sequence[Segment]], n_seg: int,
                       rng: np.random.Generator) -> list[Segment]:
    """One not-yet-drawn segment per trajectory per pass until n_seg are collected.

    When every pool is exhausted before n_seg is reached the pools are refilled
    and passes continue, so segments start repeating.
    """
    if n_seg <= 0:
        return []
    if not any(len(p) for p in segment_pools):
        raise SamplingError("all segment pools are empty")
    remaining = [list(range(len(p))) for p in segment_pools]
    picked: list[Segment] = []
    while len(picked) < n_seg:
        if not any(remaining):
            log.warning("segment pools exhausted after %d draws, refilling (duplicates follow)", len(picked))
            remaining = [list(range(len(p))) for p in segment_pools]
        for pool, rem in zip(segment_pools, remaining):
            if not rem:
                continue
            j = rem.pop(int(rng.integers(len(rem))))
            picked.append(pool[j])
            if len(picked) == n_seg:
                break
    return picked
