"""Exact and surrogate AUC quantities, group-level AUC and fairness metrics.

Group labels are 1-based (``1..m``); matrices are indexed ``[z - 1, z' - 1]``
with positives drawn from group ``z`` and negatives from group ``z'``.
Undefined group pairs (an empty side) hold ``nan`` and are skipped by every
reduction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError, UndefinedAUCError


def _as_scores(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def _check_nonempty(pos: np.ndarray, neg: np.ndarray) -> None:
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError(
            f"AUC needs both sides: got {pos.size} positive and {neg.size} negative scores"
        )


def exact_auc(pos_scores, neg_scores, ties: str = "strict") -> float:
    """Fraction of (positive, negative) pairs ranked correctly.

    ``ties="strict"`` counts ``s+ == s-`` as 0; ``ties="half"`` counts it as 1/2
    (the Mann-Whitney convention). Computed by sorting the negatives, so
    ``O((n+ + n-) log n-)``, but the count is an exact integer and therefore
    identical to pair enumeration.
    """
    pos = _as_scores(pos_scores)
    neg = _as_scores(neg_scores)
    _check_nonempty(pos, neg)
    if ties not in ("strict", "half"):
        raise ValueError(f"ties must be 'strict' or 'half', got {ties!r}")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    wins = int(below.sum())
    total = pos.size * neg.size
    if ties == "half":
        equal = int((np.searchsorted(neg_sorted, pos, side="right") - below).sum())
        return (2 * wins + equal) / (2 * total)
    return wins / total


def logistic_loss(a) -> np.ndarray:
    """``log(1 + exp(-a))`` without overflow."""
    a = np.asarray(a, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(a))) + np.maximum(-a, 0.0)


def surrogate_auc_risk(pos_scores, neg_scores) -> float:
    """Mean pairwise logistic loss of the margins ``s+_i - s-_j``."""
    pos = _as_scores(pos_scores)
    neg = _as_scores(neg_scores)
    _check_nonempty(pos, neg)
    margins = pos[:, None] - neg[None, :]
    return float(logistic_loss(margins).mean())


def surrogate_pair_matrix(pos_scores, neg_scores) -> np.ndarray:
    """Matrix of ``sigmoid(s+_i - s-_j)``, a smooth stand-in for ``1[s+_i > s-_j]``."""
    pos = _as_scores(pos_scores)
    neg = _as_scores(neg_scores)
    _check_nonempty(pos, neg)
    return expit(pos[:, None] - neg[None, :])


def surrogate_group_gap(pair_matrix, p_tilde) -> float:
    """Weighted mean of the pair matrix under ``p_tilde`` minus its uniform mean."""
    m = np.asarray(pair_matrix, dtype=np.float64)
    w = np.asarray(getattr(p_tilde, "weights", p_tilde), dtype=np.float64)
    if w.shape != m.shape:
        raise ShapeError(f"pair distribution shape {w.shape} != pair matrix shape {m.shape}")
    return float(np.sum(w * m) - m.mean())


@dataclass
class GroupAucReport:
    overall_auc: float
    group_auc: np.ndarray
    gap: np.ndarray
    pair_weight: np.ndarray

    @property
    def num_groups(self) -> int:
        return self.group_auc.shape[0]

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.group_auc)

    def violation(self) -> float:
        return fairness_violation(self)

    def min_max(self) -> float:
        return minmax_ratio(self)

    def max_gap(self) -> float:
        """Largest signed gap over defined pairs (used for feasibility checks)."""
        return float(np.nanmax(self.gap))

    def to_dict(self) -> dict:
        def clean(a: np.ndarray) -> list:
            return [[None if math.isnan(v) else float(v) for v in row] for row in a]

        return {
            "overall_auc": float(self.overall_auc),
            "group_auc": clean(self.group_auc),
            "gap": clean(self.gap),
            "violation": self.violation(),
            "min_max": self.min_max(),
        }


def group_auc_report(scores, labels, groups, num_groups: int | None = None,
                     ties: str = "strict") -> GroupAucReport:
    scores = _as_scores(scores)
    labels = np.asarray(labels).ravel()
    groups = np.asarray(groups).ravel()
    if not (scores.size == labels.size == groups.size):
        raise ShapeError("scores, labels and groups must have equal length")
    m = int(num_groups if num_groups is not None else groups.max())

    pos_mask = labels == 1
    neg_mask = labels == -1
    overall = exact_auc(scores[pos_mask], scores[neg_mask], ties=ties)
    n_pos, n_neg = int(pos_mask.sum()), int(neg_mask.sum())

    group_auc = np.full((m, m), np.nan)
    weight = np.zeros((m, m))
    for z in range(1, m + 1):
        sp = scores[pos_mask & (groups == z)]
        for zp in range(1, m + 1):
            sn = scores[neg_mask & (groups == zp)]
            weight[z - 1, zp - 1] = sp.size * sn.size / (n_pos * n_neg)
            if sp.size and sn.size:
                group_auc[z - 1, zp - 1] = exact_auc(sp, sn, ties=ties)
    return GroupAucReport(overall, group_auc, group_auc - overall, weight)


def fairness_violation(report: GroupAucReport) -> float:
    """Largest absolute group-level gap over the defined group pairs."""
    if not report.defined.any():
        raise UndefinedAUCError("no group pair has both a positive and a negative sample")
    return float(np.nanmax(np.abs(report.gap)))


def minmax_ratio(report: GroupAucReport) -> float:
    if not report.defined.any():
        raise UndefinedAUCError("no group pair has both a positive and a negative sample")
    hi = float(np.nanmax(report.group_auc))
    if hi == 0.0:
        warnings.warn("all group AUCs are 0; min/max ratio set to 0", RuntimeWarning)
        return 0.0
    return float(np.nanmin(report.group_auc)) / hi
