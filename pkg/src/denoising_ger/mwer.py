"""Minimum-WER reinforcement objective over a fixed n-best list.

    L_RL = (1/N) * sum_i p_i * (w_i - mean(w))

with p the softmax of the model's sequence log scores and w the per-hypothesis
word error rates, which are constants of the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .hyp_text import wer


@dataclass
class MwerBatchItem:
    hypotheses: list[str]
    reference: str
    raw_scores: Tensor   # (N,) log probabilities, differentiable
    wers: np.ndarray     # (N,)

    def __post_init__(self):
        self.wers = np.asarray(self.wers, dtype=np.float64)
        n = len(self.hypotheses)
        if n == 0:
            raise ValueError("MWER item needs at least one hypothesis")
        if self.raw_scores.shape != (n,) or self.wers.shape != (n,):
            raise ValueError(f"length mismatch: {n} hypotheses, scores {self.raw_scores.shape}, "
                             f"wers {self.wers.shape}")

    @property
    def baseline(self) -> float:
        return float(self.wers.mean())

    @classmethod
    def build(cls, hypotheses: Sequence[str], reference: str, raw_scores) -> "MwerBatchItem":
        scores = raw_scores if isinstance(raw_scores, Tensor) else Tensor(raw_scores)
        return cls(list(hypotheses), reference, scores, np.array([wer(reference, h) for h in hypotheses]))


def normalize_likelihoods(raw_scores) -> Tensor:
    """Softmax over sequence log scores (max-subtracted)."""
    s = raw_scores if isinstance(raw_scores, Tensor) else Tensor(np.asarray(raw_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("cannot normalise an empty score list")
    if not np.isfinite(s.data).all():
        raise ValueError("raw scores must be finite")
    return ops.softmax(s)


def rl_loss(item: MwerBatchItem) -> Tensor:
    p_hat = normalize_likelihoods(item.raw_scores)
    n = item.wers.size
    advantage = item.wers - item.baseline
    return ops.scale(ops.sum(ops.mul(p_hat, advantage)), 1.0 / n)


def batch_rl_loss(items: Sequence[MwerBatchItem]) -> Tensor:
    """Mean of per-utterance losses."""
    if not items:
        raise ValueError("empty MWER batch")
    total = rl_loss(items[0])
    for it in items[1:]:
        total = ops.add(total, rl_loss(it))
    return ops.scale(total, 1.0 / len(items))
