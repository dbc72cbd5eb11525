"""Training losses over scored tracklet branches.

The scorer emits raw reals; the logistic squash happens inside each loss.
Every loss also returns its exact gradient with respect to each raw score,
which the training loop feeds into the encoder backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Tracklet
from .numerics import logistic, softplus


@dataclass(frozen=True)
class ScoredBranch:
    """A branch at one search step: raw score plus identity bookkeeping."""

    raw: float
    ids_count: int
    is_gt: bool = False
    tracklet: Optional[Tracklet] = None


@dataclass(frozen=True)
class LossOutput:
    """Loss value plus d(value)/d(raw score) for the gt and each branch."""

    value: float
    gt_grad: float
    branch_grads: np.ndarray


def margin_loss(
    gt: ScoredBranch, negatives: Sequence[ScoredBranch], alpha: float = 1.0,
) -> LossOutput:
    """Hinge on sigmoid scores: sum_n max(0, alpha - s(gt) + s(neg_n)).

    Gradients flow only through active hinge terms, through the logistic on
    both sides. An empty negative set gives a zero loss and zero gradients.
    """
    if not gt.is_gt:
        raise ValueError("margin_loss first argument must be the gt branch")
    grads = np.zeros(len(negatives))
    if not negatives:
        return LossOutput(0.0, 0.0, grads)
    s_gt = logistic(gt.raw)
    ds_gt = s_gt * (1.0 - s_gt)
    value = 0.0
    gt_grad = 0.0
    for n, neg in enumerate(negatives):
        s_n = logistic(neg.raw)
        term = alpha - s_gt + s_n
        if term > 0.0:
            value += term
            gt_grad -= ds_gt
            grads[n] = s_n * (1.0 - s_n)
    return LossOutput(value, gt_grad, grads)


def rank_loss(branches: Sequence[ScoredBranch]) -> LossOutput:
    """Pairwise ordering loss on raw scores, driven by identity-switch counts.

    For each unordered pair with differing ids_count the term is
    sigmoid(gamma * (f_i - f_j)) with gamma = +1 when branch i has more
    switches, -1 when fewer: minimizing pushes branches with more identity
    switches below cleaner ones. Pairs with equal ids_count are skipped, so
    fewer than two distinct counts give a zero loss.
    """
    grads = np.zeros(len(branches))
    value = 0.0
    for i in range(len(branches)):
        for j in range(i + 1, len(branches)):
            bi, bj = branches[i], branches[j]
            if bi.ids_count == bj.ids_count:
                continue
            gamma = 1.0 if bi.ids_count > bj.ids_count else -1.0
            s = logistic(gamma * (bi.raw - bj.raw))
            value += s
            d = gamma * s * (1.0 - s)
            grads[i] += d
            grads[j] -= d
    return LossOutput(value, 0.0, grads)


def step_loss(
    gt: ScoredBranch,
    retained: Sequence[ScoredBranch],
    alpha: float = 1.0,
    rank_weight: float = 1.0,
) -> LossOutput:
    """Margin loss of gt against the retained set plus the rank loss over it."""
    m = margin_loss(gt, retained, alpha)
    r = rank_loss(retained)
    return LossOutput(
        m.value + rank_weight * r.value,
        m.gt_grad,
        m.branch_grads + rank_weight * r.branch_grads,
    )


def cross_entropy_baseline(
    scores: Sequence[float], labels: Sequence[int],
) -> LossOutput:
    """Summed binary cross-entropy on raw scores; gradient is sigma(raw) - y.

    Computed via softplus so large raw scores cannot overflow:
    -[y log s + (1-y) log(1-s)] == y softplus(-raw) + (1-y) softplus(raw).
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels must align")
    raw = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    value = float(np.sum(y * softplus(-raw) + (1.0 - y) * softplus(raw)))
    grads = logistic(raw) - y
    return LossOutput(value, 0.0, np.atleast_1d(grads))
