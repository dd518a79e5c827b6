"""Sequence losses and their gradients with respect to the softmax inputs.

Cross-entropy, reward-weighted cross-entropy and REINFORCE share one kernel:
the logit gradient of -log p(w_t) is ``p_t - onehot(w_t)``, and the REINFORCE
gradient is that vector scaled by ``reward - baseline``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import greedy_decode, sequence_probs


@dataclass
class SentenceLoss:
    value: float
    logit_grads: np.ndarray  # (T, V), row t-1 is dL/do_t


@dataclass
class VideoLoss:
    value: float
    sentences: list


def _check_id(p: np.ndarray, token: int) -> None:
    if not 0 <= token < p.shape[-1]:
        raise ValueError(f"token id {token} out of range for {p.shape[-1]} classes")


def xe_logit_grad(p_t: np.ndarray, target_id: int) -> np.ndarray:
    p_t = np.asarray(p_t, dtype=np.float64)
    _check_id(p_t, target_id)
    g = p_t.copy()
    g[target_id] -= 1.0
    return g


def rl_logit_grad(p_t: np.ndarray, sampled_id: int, reward: float, baseline: float) -> np.ndarray:
    return (reward - baseline) * xe_logit_grad(p_t, sampled_id)


def _xe_terms(cache, target: Sequence[int]):
    probs = sequence_probs(cache)
    target = list(target)
    if probs.shape[0] != len(target):
        raise ValueError(f"cache has {probs.shape[0]} steps but target has {len(target)} tokens")
    for tok in target:
        _check_id(probs, tok)
    steps = np.arange(len(target))
    value = -float(np.sum(np.log(probs[steps, target])))
    grads = probs.copy()
    grads[steps, target] -= 1.0
    return value, grads


def xe_sentence_loss(cache, target: Sequence[int]) -> SentenceLoss:
    """-sum_t log p(w_t | h_t) and its per-step logit gradients."""
    return SentenceLoss(*_xe_terms(cache, target))


def rl_sentence_loss(cache, sample: Sequence[int], reward: float, baseline: float) -> SentenceLoss:
    """REINFORCE surrogate ``-(r - b) log p(sample)``; only its gradient is meaningful."""
    value, grads = _xe_terms(cache, sample)
    advantage = reward - baseline
    return SentenceLoss(advantage * value, advantage * grads)


def wxe_video_loss(caches: Sequence, targets: Sequence[Sequence[int]], rewards: Sequence[float],
                   baselines: Sequence[float]) -> VideoLoss:
    """-(1/N) sum_i (r_i - b_i) log p(w_i) over one item's N sequences.

    Each returned sentence loss already carries the 1/N factor.
    """
    n = len(caches)
    if not n or not (n == len(targets) == len(rewards) == len(baselines)):
        raise ValueError("caches, targets, rewards and baselines must have the same non-zero length")
    sentences = []
    for cache, target, r, b in zip(caches, targets, rewards, baselines):
        s = rl_sentence_loss(cache, target, r, b)
        sentences.append(SentenceLoss(s.value / n, s.logit_grads / n))
    return VideoLoss(math.fsum(s.value for s in sentences), sentences)


def scb_baseline(rewards: Sequence[float]) -> float:
    """Mean reward of an item's ground-truth captions."""
    if len(rewards) == 0:
        raise ValueError("baseline of an empty reward list")
    return math.fsum(rewards) / len(rewards)


def sampled_scb_baseline(sample_rewards: Sequence[float]) -> float:
    """Mean reward of the samples drawn for an item in the current batch.

    The baseline then depends on the sample it is subtracted from, so the
    gradient estimate is no longer exactly unbiased.
    """
    return scb_baseline(sample_rewards)


def greedy_baseline(params, features: np.ndarray, reward_fn: Callable, max_len: int) -> float:
    """Reward of the model's own greedy caption: one decode, one reward call."""
    return float(reward_fn(greedy_decode(params, features, max_len)))


@dataclass
class RewardTable:
    rewards: dict                      # item_id -> list of caption rewards
    baselines: dict = field(default_factory=dict)  # item_id -> b(v)

    @classmethod
    def from_rewards(cls, rewards: dict) -> "RewardTable":
        return cls({k: list(v) for k, v in rewards.items()},
                   {k: scb_baseline(v) for k, v in rewards.items()})

    def to_json(self) -> dict:
        return {k: {"rewards": list(self.rewards[k]), "baseline": self.baselines[k]} for k in self.rewards}

    @classmethod
    def from_json(cls, obj: dict) -> "RewardTable":
        return cls({k: list(v["rewards"]) for k, v in obj.items()},
                   {k: float(v["baseline"]) for k, v in obj.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "RewardTable":
        return cls.from_json(json.loads(Path(path).read_text()))
