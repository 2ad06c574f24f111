"""Memory-as-action agents on a synthetic multi-hop QA world, trained with DCPO.

The policy edits its own working memory (PRUNE with a summary) as well as
calling tools (SEARCH, ANSWER). Training cuts each trajectory at those edits
so every token's gradient is taken under the context it was sampled from.
"""
__version__ = "0.1.0"

from .baselines import ControllerConfig, apply_controller
from .dcpo import TrainConfig, batch_update, compute_advantages, segment_loss_and_grad, sft_loss, train
from .environment import Environment, EnvConfig, generate_task, generate_world, judge, search, terminal_reward
from .memory import IdSource, MemoryEdit, Record, WorkingMemory, append, apply_edit
from .policy import PolicyParams, grad_logprob, logprob, sample_action
from .rollout import Limits, Trajectory, replay_check, run_episode
from .segmentation import Segment, round_robin_sample, segment
from .tokenizer import VOCAB, count_tokens, detokenize, tokenize

__all__ = [
    "ControllerConfig", "apply_controller", "TrainConfig", "batch_update", "compute_advantages",
    "segment_loss_and_grad", "sft_loss", "train", "Environment", "EnvConfig", "generate_task",
    "generate_world", "judge", "search", "terminal_reward", "IdSource", "MemoryEdit", "Record",
    "WorkingMemory", "append", "apply_edit", "PolicyParams", "grad_logprob", "logprob", "sample_action",
    "Limits", "Trajectory", "replay_check", "run_episode", "Segment", "round_robin_sample", "segment",
    "VOCAB", "count_tokens", "detokenize", "tokenize",
]
