"""ROC curves, AUC and threshold accuracy for membership scores.

Scores are oriented so that higher means more member-like. Residual-based
accuracy uses the opposite orientation (member iff residual < tau).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class RocCurve:
    points: List[Tuple[float, float]]
    auc: float

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def _scores(a, name):
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


def roc_and_auc(member_scores, nonmember_scores) -> RocCurve:
    """ROC over every distinct score threshold, AUC by the trapezoid rule.

    Tied scores form a single threshold step, so a tie between a member and a
    non-member contributes a diagonal segment (half credit).
    """
    pos = _scores(member_scores, "member_scores")
    neg = _scores(nonmember_scores, "nonmember_scores")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(1.0 - labels)[ends]
    tpr = np.r_[0.0, tp / pos.size]
    fpr = np.r_[0.0, fp / neg.size]
    # trapezoid area on integer counts, so a perfect ranking gives exactly 1.0
    tp0, fp0 = np.r_[0.0, tp], np.r_[0.0, fp]
    area2 = float(np.sum(np.diff(fp0) * (tp0[1:] + tp0[:-1])))
    auc = area2 / (2.0 * pos.size * neg.size)
    return RocCurve(list(zip(fpr.tolist(), tpr.tolist())), auc)


def mann_whitney_auc(member_scores, nonmember_scores) -> float:
    """Brute-force pairwise AUC: P(member > non-member) + 0.5 * P(tie)."""
    pos = _scores(member_scores, "member_scores")
    neg = _scores(nonmember_scores, "nonmember_scores")
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def acc_fpr_at_threshold(member_residuals, nonmember_residuals, tau: float):
    """Accuracy and false-positive rate of the rule ``member iff residual < tau``."""
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    pos = _scores(member_residuals, "member_residuals")
    neg = _scores(nonmember_residuals, "nonmember_residuals")
    tp = int(np.sum(pos < tau))
    fp = int(np.sum(neg < tau))
    tn = neg.size - fp
    return (tp + tn) / (pos.size + neg.size), fp / neg.size
