"""Detector training objective: cross-entropy + smooth L1 with hard negative mining.

Positives (anchors matched to a gt) contribute classification loss against
their class and smooth-L1 loss on encoded offsets.  Background anchors are
ranked by their current background cross-entropy, descending, and only the
hardest ``ratio * num_pos`` survive.  The total is normalized by the positive
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .anchors import MatchResult
from .tensor import Tensor

__all__ = ["LossBreakdown", "softmax_ce", "softmax_ce_rows", "smooth_l1", "multibox"]


def softmax_ce_rows(logits: Tensor, labels) -> Tensor:
    """Per-row -log softmax(logits)[label], shape (B,); max-subtraction stabilized."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_ce expects (B, C+1) logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if lab.shape[0] != b:
        raise ValueError(f"{lab.shape[0]} labels for {b} logit rows")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"labels must lie in [0, {c - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    soft = ez / sez
    rows = np.log(sez[:, 0]) - z[np.arange(b), lab]

    def bwd(g: np.ndarray):
        d = soft.copy()
        d[np.arange(b), lab] -= 1.0
        return (d * g[:, None],)

    return T.apply_op("softmax_ce_rows", [logits], rows, bwd)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows (scalar Tensor)."""
    return T.reduce_mean(softmax_ce_rows(logits, labels))


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over all coords of 0.5*x^2 for |x| < 1 else |x| - 0.5, x = pred - target."""
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    a = np.abs(d)
    small = a < 1.0
    val = np.where(small, 0.5 * d * d, a - 0.5).sum()

    def bwd(g: np.ndarray):
        dd = np.clip(d, -1.0, 1.0) * g
        gp = dd if pred.requires_grad else None
        gt = -dd if target.requires_grad else None
        return (gp, gt)

    return T.apply_op("smooth_l1", [pred, target], np.asarray(val), bwd)


@dataclass
class LossBreakdown:
    """Normalized total (on the tape) plus its unnormalized summands as floats."""

    total: Tensor
    conf_pos: float
    conf_neg: float
    loc: float
    num_pos: int
    num_mined_neg: int

    @property
    def value(self) -> float:
        return self.total.item()


def _mined_negatives(conf_data: np.ndarray, neg_idx: np.ndarray, k: int) -> np.ndarray:
    # rank background anchors by background CE descending; ties by anchor index
    z = conf_data[neg_idx] - conf_data[neg_idx].max(axis=1, keepdims=True)
    bg_loss = np.log(np.exp(z).sum(axis=1)) - z[:, 0]
    order = np.lexsort((neg_idx, -bg_loss))  # primary: loss desc, secondary: index asc
    return np.sort(neg_idx[order[:k]])


def multibox(
    conf: Tensor,
    loc: Tensor,
    matches: MatchResult,
    neg_pos_ratio: float = 3.0,
    alpha: float = 1.0,
) -> LossBreakdown:
    """One image's detection loss over (A, C+1) conf logits and (A, 4) offsets.

    total = (conf_pos + conf_neg + alpha * loc) / max(num_pos, 1).  With no
    positives the loss falls back to the min(A, 8) hardest background anchors.
    """
    a = matches.class_ids.shape[0]
    if conf.ndim != 2 or conf.shape[0] != a:
        raise ValueError(f"conf shape {conf.shape} inconsistent with {a} anchors")
    if loc.shape != (a, 4):
        raise ValueError(f"loc shape {loc.shape} inconsistent with {a} anchors")
    pos_idx = matches.positive_indices
    neg_idx = np.flatnonzero(matches.class_ids < 0)
    num_pos = pos_idx.size
    if num_pos:
        k = min(int(neg_pos_ratio * num_pos), neg_idx.size)
    else:
        k = min(a, 8)
    mined = _mined_negatives(conf.data, neg_idx, k) if k else np.empty(0, dtype=np.int64)

    zero = Tensor(np.zeros((), dtype=conf.data.dtype))
    if num_pos:
        conf_pos_t = T.reduce_sum(
            softmax_ce_rows(T.take(conf, pos_idx), matches.class_ids[pos_idx] + 1)
        )
        loc_t = smooth_l1(T.take(loc, pos_idx), Tensor(matches.loc_targets[pos_idx]))
    else:
        conf_pos_t, loc_t = zero, zero
    conf_neg_t = (
        T.reduce_sum(softmax_ce_rows(T.take(conf, mined), np.zeros(mined.size, dtype=np.int64)))
        if mined.size
        else zero
    )
    total = T.scale(
        T.add(T.add(conf_pos_t, conf_neg_t), T.scale(loc_t, alpha)), 1.0 / max(num_pos, 1)
    )
    return LossBreakdown(
        total=total,
        conf_pos=conf_pos_t.item(),
        conf_neg=conf_neg_t.item(),
        loc=loc_t.item(),
        num_pos=int(num_pos),
        num_mined_neg=int(mined.size),
    )
