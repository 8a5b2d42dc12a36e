"""Threshold-free detection metrics.

Scores follow the convention "higher means more out-of-distribution":
positives are OOD samples (or groups), negatives are in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class LabeledScores:
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.float64).ravel()
        neg = np.asarray(self.neg, dtype=np.float64).ravel()
        if pos.size == 0 or neg.size == 0:
            raise ValueError("both positive and negative scores are required")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)


def _labeled(pos, neg) -> LabeledScores:
    if isinstance(pos, LabeledScores):
        return pos
    return LabeledScores(pos, neg)


def auroc(pos, neg=None) -> float:
    """Mann-Whitney AUROC with ties counted one half, via tie-averaged ranks."""
    ls = _labeled(pos, neg)
    p, n = ls.pos.size, ls.neg.size
    ranks = rankdata(np.concatenate([ls.pos, ls.neg]))
    u = ranks[:p].sum() - p * (p + 1) / 2
    return float(u / (p * n))


def _blocks(ls: LabeledScores):
    """Cumulative (tp, fp) after each block of tied scores, descending."""
    scores = np.concatenate([ls.pos, ls.neg])
    is_pos = np.concatenate([np.ones(ls.pos.size), np.zeros(ls.neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(is_pos)[last]
    fp = np.cumsum(1 - is_pos)[last]
    return scores[last], tp, fp


def aupr(pos, neg=None) -> float:
    """Non-interpolated average precision with OOD as the positive class."""
    ls = _labeled(pos, neg)
    _, tp, fp = _blocks(ls)
    recall = tp / ls.pos.size
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_tpr(pos, neg=None, tpr_target: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR reaches ``tpr_target``.

    A sample is flagged positive when its score is >= the threshold; the
    candidate thresholds are the observed scores.
    """
    ls = _labeled(pos, neg)
    if not 0 < tpr_target <= 1:
        raise ValueError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    _, tp, fp = _blocks(ls)
    reached = tp >= tpr_target * ls.pos.size - 1e-9
    i = int(np.argmax(reached))
    return float(fp[i] / ls.neg.size)
