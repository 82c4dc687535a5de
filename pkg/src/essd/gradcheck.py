"""Finite-difference verification of every differentiable op and the full loss.

Each entry builds inputs that sit safely away from the op's non-smooth points
(relu at 0, pooling argmax ties, the offset-loss elbow at |d| = 1) so central
differences are valid, then compares tape gradients in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .anchors import MatchResult
from .loss import multibox, smooth_l1, softmax_ce

__all__ = ["CheckResult", "OP_CASES", "run_gradcheck"]

DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _away_from(x: np.ndarray, points: list[float], margin: float) -> np.ndarray:
    """Push values outside ``margin`` of each kink point, keeping signs of offsets."""
    out = x.copy()
    for p in points:
        d = out - p
        close = np.abs(d) < margin
        out[close] = p + np.where(d[close] < 0, -margin, margin)
    return out


def _distinct_field(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """All-distinct values with gaps far above the probe step, for pooling."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) / n - 0.5).reshape(shape)


def _case_conv2d(rng):
    x = rng.standard_normal((2, 3, 6, 6)) * 0.5
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4) * 0.1
    return lambda xx, ww, bb: T.conv2d(xx, ww, bb, stride=2, pad=1), [x, w, b]


def _case_deconv2d(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 0.5
    w = rng.standard_normal((3, 4, 3, 3)) * 0.3
    return lambda xx, ww: T.deconv2d(xx, ww, stride=2, pad=1), [x, w]


def _case_batch_norm(rng):
    x = rng.standard_normal((3, 4, 5, 5))
    g = rng.uniform(0.5, 1.5, size=4)
    b = rng.standard_normal(4) * 0.2
    return lambda xx, gg, bb: T.batch_norm(xx, gg, bb, mode="train"), [x, g, b]


def _case_relu(rng):
    x = _away_from(rng.standard_normal((2, 3, 5, 5)), [0.0], 1e-3)
    return lambda xx: T.relu(xx), [x]


def _case_max_pool2d(rng):
    x = _distinct_field(rng, (2, 3, 6, 6))
    return lambda xx: T.max_pool2d(xx, kernel=2, stride=2), [x]


def _case_concat(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 5, 4, 4))
    return lambda aa, bb: T.concat([aa, bb], axis=1), [a, b]


def _case_eltwise_sum(rng):
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    return lambda aa, bb: T.eltwise(aa, bb, "sum"), [a, b]


def _case_eltwise_prod(rng):
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    return lambda aa, bb: T.eltwise(aa, bb, "prod"), [a, b]


def _case_scale(rng):
    x = rng.standard_normal((3, 7))
    return lambda xx: T.scale(xx, 1.7), [x]


def _case_reshape(rng):
    x = rng.standard_normal((2, 3, 4))
    return lambda xx: T.reshape(xx, (2, 12)), [x]


def _case_transpose(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return lambda xx: T.transpose(xx, (0, 2, 3, 1)), [x]


def _case_take(rng):
    x = rng.standard_normal((6, 4))
    idx = [0, 2, 2, 5]  # duplicate rows must accumulate
    return lambda xx: T.take(xx, idx, axis=0), [x]


def _case_reduce_sum(rng):
    x = rng.standard_normal((3, 4, 2))
    return lambda xx: T.reduce_sum(xx), [x]


def _case_reduce_mean(rng):
    x = rng.standard_normal((3, 4, 2))
    return lambda xx: T.reduce_mean(xx), [x]


def _case_softmax_ce(rng):
    logits = rng.standard_normal((8, 4))
    labels = rng.integers(0, 4, size=8)
    return lambda ll: softmax_ce(ll, labels), [logits]


def _case_smooth_l1(rng):
    pred = rng.standard_normal((6, 4))
    target = T.Tensor(np.zeros((6, 4)))
    pred = _away_from(pred, [-1.0, 1.0], 1e-3)  # elbow of the clipped penalty
    return lambda pp: smooth_l1(pp, target), [pred]


def _case_multibox(rng):
    a = 12
    ids = np.full(a, -1, dtype=np.int32)
    pos = rng.choice(a, size=2, replace=False)
    ids[pos] = rng.integers(0, 2, size=2)
    gt = np.where(ids >= 0, 0, -1).astype(np.int32)
    loc_t = rng.standard_normal((a, 4)).astype(np.float32) * 0.4
    matches = MatchResult(ids, gt, loc_t)
    conf = rng.standard_normal((a, 3)) * 1.5
    loc = _away_from(rng.standard_normal((a, 4)) * 0.4, [0.0], 0.0)
    # keep |pred - target| clear of the elbow at 1
    d = loc - loc_t
    loc = loc_t + _away_from(d, [-1.0, 1.0], 5e-3)
    return lambda cc, ll: multibox(cc, ll, matches).total, [conf, loc]


OP_CASES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "deconv2d": _case_deconv2d,
    "batch_norm": _case_batch_norm,
    "relu": _case_relu,
    "max_pool2d": _case_max_pool2d,
    "concat": _case_concat,
    "eltwise_sum": _case_eltwise_sum,
    "eltwise_prod": _case_eltwise_prod,
    "scale": _case_scale,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "take": _case_take,
    "reduce_sum": _case_reduce_sum,
    "reduce_mean": _case_reduce_mean,
    "softmax_ce": _case_softmax_ce,
    "smooth_l1": _case_smooth_l1,
    "multibox": _case_multibox,
}


def run_gradcheck(num_seeds: int = 5, base_seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    """Check every op over ``num_seeds`` input draws; returns worst error per op."""
    if num_seeds < 1:
        raise ValueError(f"num_seeds must be >= 1, got {num_seeds}")
    results = []
    for name, builder in OP_CASES.items():
        worst = 0.0
        for s in range(num_seeds):
            rng = np.random.default_rng([base_seed, s, hash(name) % (2**32)])
            fn, inputs = builder(rng)
            eps = 1e-6 if name == "multibox" else 1e-5
            worst = max(worst, T.grad_check(fn, inputs, eps=eps, seed=base_seed + s))
        results.append(CheckResult(name, worst, tol))
    return results
