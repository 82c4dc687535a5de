"""Minimal dense tensors with reverse-mode automatic differentiation.

Everything is a plain numpy array wrapped in a :class:`Tensor`.  Operations
executed while a :class:`GradTape` is active append one record each; calling
:func:`backward` on a scalar loss walks the records in reverse and accumulates
gradients into the leaf tensors.  Convolutions are computed as windowed
tensor contractions (im2col under the hood), transposed convolution is the
exact adjoint of convolution, and both share the same scatter/gather helpers
so the adjoint identity <conv(x,w), y> == <x, deconv(y,w)> holds to rounding
error.

Float32 is the intended forward dtype; every op also accepts float64, which
is what :func:`grad_check` uses for finite-difference verification.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "RunningStats",
    "backward",
    "grad_check",
    "apply_op",
    "conv2d",
    "deconv2d",
    "batch_norm",
    "relu",
    "max_pool2d",
    "concat",
    "concat_channels",
    "eltwise",
    "add",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "take",
    "reduce_sum",
    "reduce_mean",
    "set_debug_checks",
]

_DEBUG_CHECKS = os.environ.get("ESSD_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of op outputs (also via env ESSD_DEBUG=1)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense array plus a ``requires_grad`` flag and a ``grad`` slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _OpRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class GradTape:
    """Ordered log of op records; use as a context manager around the forward pass."""

    records: list[_OpRecord] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    """Wrap a computed result as a Tensor and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order.  Recording is skipped when no tape is active or no input
    requires grad, so inference pays no tracking cost.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values in output of op '{op}'")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and requires:
        tape.records.append(_OpRecord(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every grad-requiring leaf on the tape.

    The loss must be scalar.  Multi-consumer outputs have their incoming
    gradients summed; leaves with no path to the loss get zeros.  Each leaf's
    gradient is also stored on ``leaf.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.output) for r in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        parts = rec.backward(g)
        if len(parts) != len(rec.inputs):
            raise RuntimeError(f"op '{rec.op}' returned {len(parts)} gradients for {len(rec.inputs)} inputs")
        for tin, part in zip(rec.inputs, parts):
            if part is None or not tin.requires_grad:
                continue
            if part.shape != tin.shape:
                raise RuntimeError(f"op '{rec.op}' produced gradient shape {part.shape} for input {tin.shape}")
            prev = grads.get(id(tin))
            grads[id(tin)] = part if prev is None else prev + part
    result: dict[Tensor, np.ndarray] = {}
    for rec in tape.records:
        for tin in rec.inputs:
            if tin.requires_grad and id(tin) not in produced and tin not in result:
                g = grads.get(id(tin))
                tin.grad = g if g is not None else np.zeros_like(tin.data)
                result[tin] = tin.grad
    return result


# ---------------------------------------------------------------------------
# correlation helpers shared by conv2d / deconv2d


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # read-only sliding view (N, C, k, k, Ho, Wo) over the padded input
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False
    )

def _corr_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, cin, h, wi = x.shape
    cout, cw, k, _ = w.shape
    if cw != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {cw}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wi + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d window {k}x{k} stride {stride} pad {pad} does not fit input {h}x{wi}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = _windows(xp, k, stride, ho, wo)
    y = np.tensordot(view, w, axes=([1, 2, 3], [1, 2, 3]))  # (N, Ho, Wo, Cout)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _corr_input_grad(
    g: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple[int, int]
) -> np.ndarray:
    # adjoint of _corr_forward w.r.t. its input: gather per-window products and
    # scatter-add them back onto the (padded) input grid
    n, cout, ho, wo = g.shape
    _, cin, k, _ = w.shape
    h, wi = out_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, Cin, k, k)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # (N, Cin, k, k, Ho, Wo)
    buf = np.zeros((n, cin, h + 2 * pad, wi + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return buf[:, :, pad : pad + h, pad : pad + wi] if pad else buf


def _corr_weight_grad(
    g: np.ndarray, x: np.ndarray, stride: int, pad: int, k: int
) -> np.ndarray:
    n, cout, ho, wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = _windows(xp, k, stride, ho, wo)
    return np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))  # (Cout, Cin, k, k)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (Cout, Cin, k, k), square kernel.

    Output spatial size is floor((H + 2*pad - k) / stride) + 1; a window that
    does not fit raises ValueError.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d kernels must be square, got {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    k = weight.shape[2]
    y = _corr_forward(x.data, weight.data, stride, pad)
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
        y += bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)
    xd, wd = x.data, weight.data
    hw = (x.shape[2], x.shape[3])

    def bwd(g: np.ndarray):
        gx = _corr_input_grad(g, wd, stride, pad, hw) if x.requires_grad else None
        gw = _corr_weight_grad(g, xd, stride, pad, k) if weight.requires_grad else None
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return (gx, gw, gb)

    return apply_op("conv2d", inputs, y, bwd)


def deconv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d), weight (Cin, Cout, k, k).

    Output spatial size is (H - 1)*stride - 2*pad + k.  Each input pixel
    scatters a k x k stamp scaled by the weight; overlaps accumulate.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"deconv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError(f"deconv2d kernels must be square, got {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"deconv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[0]}"
        )
    if stride < 1 or pad < 0:
        raise ValueError(f"deconv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, cin, h, wi = x.shape
    k = weight.shape[2]
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wi - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ValueError(f"deconv2d output size {ho}x{wo} is empty for input {h}x{wi}")
    y = _corr_input_grad(x.data, weight.data, stride, pad, (ho, wo))
    xd, wd = x.data, weight.data

    def bwd(g: np.ndarray):
        gx = _corr_forward(g, wd, stride, pad) if x.requires_grad else None
        gw = _corr_weight_grad(xd, g, stride, pad, k) if weight.requires_grad else None
        return (gx, gw)

    return apply_op("deconv2d", [x, weight], y, bwd)


@dataclass
class RunningStats:
    """EMA of per-channel batch statistics; ``count`` tracks batches seen."""

    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray  # shape (1,), float; 0 means never updated

    @staticmethod
    def create(channels: int, dtype=np.float32) -> "RunningStats":
        return RunningStats(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            count=np.zeros(1, dtype=dtype),
        )


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats | None = None,
    eps: float = 1e-5,
    mode: str = "train",
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) with affine scale/shift.

    Train mode normalizes by the batch's population statistics and folds them
    into ``stats`` as running = momentum * running + (1 - momentum) * batch.
    Eval mode normalizes by the running statistics and raises if they were
    never populated.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects a 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    gd, bd = gamma.data.reshape(1, c, 1, 1), beta.data.reshape(1, c, 1, 1)
    if mode == "train":
        axes = (0, 2, 3)
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # population variance (ddof=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        m = x.data.size // c
        if stats is not None:
            stats.mean[:] = momentum * stats.mean + (1.0 - momentum) * mu
            stats.var[:] = momentum * stats.var + (1.0 - momentum) * var
            stats.count[0] += 1

        def bwd(g: np.ndarray):
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            if x.requires_grad:
                gsum = g.sum(axis=axes).reshape(1, c, 1, 1)
                gx_sum = (g * xhat).sum(axis=axes).reshape(1, c, 1, 1)
                gx = (gd * inv.reshape(1, c, 1, 1)) * (g - gsum / m - xhat * gx_sum / m)
            else:
                gx = None
            return (gx, ggamma, gbeta)

    else:
        if stats is None or float(stats.count[0]) == 0.0:
            raise RuntimeError("batch_norm eval mode requires populated running statistics")
        inv = 1.0 / np.sqrt(stats.var.astype(x.dtype) + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        def bwd(g: np.ndarray):
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gx = g * gd * inv.reshape(1, c, 1, 1) if x.requires_grad else None
            return (gx, ggamma, gbeta)

    y = gd * xhat + bd
    return apply_op("batch_norm", [x, gamma, beta], y, bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient 0 at exactly 0."""
    y = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(g: np.ndarray):
        return (g * mask,)

    return apply_op("relu", [x], y, bwd)


def max_pool2d(x: Tensor, kernel: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding; gradient routes to the first argmax per window."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects a 4-d input, got {x.shape}")
    if kernel < 1 or stride < 1 or pad < 0:
        raise ValueError(f"max_pool2d got kernel={kernel} stride={stride} pad={pad}")
    if pad >= kernel:
        raise ValueError(f"max_pool2d pad {pad} must be smaller than kernel {kernel}")
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"max_pool2d window {kernel} stride {stride} pad {pad} does not fit padded input {h}x{w}"
        )
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    view = _windows(xp, kernel, stride, ho, wo)
    flat = np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)  # first max wins ties
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        oi, oj = idx // kernel, idx % kernel
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + oi
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + oj
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        flat_idx = ((nn * c + cc) * hp + rows) * wp + cols
        buf = np.zeros(n * c * hp * wp, dtype=g.dtype)
        np.add.at(buf, flat_idx.ravel(), g.ravel())
        buf = buf.reshape(n, c, hp, wp)
        return (buf[:, :, pad : pad + h, pad : pad + w] if pad else buf,)

    return apply_op("max_pool2d", [x], y, bwd)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``; all other dims must agree."""
    if not xs:
        raise ValueError("concat needs at least one input")
    ref = xs[0].shape
    for i, t in enumerate(xs[1:], start=1):
        if t.ndim != len(ref) or any(
            a != b for d, (a, b) in enumerate(zip(t.shape, ref)) if d != axis
        ):
            raise ValueError(f"concat input {i} has shape {t.shape}, incompatible with input 0 shape {ref}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g: np.ndarray):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return apply_op("concat", list(xs), y, bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Channel (axis 1) concatenation of NCHW tensors."""
    return concat(xs, axis=1)


def eltwise(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """Elementwise 'sum' or 'prod' of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"eltwise shapes differ: {a.shape} vs {b.shape}")
    if mode == "sum":
        def bwd(g: np.ndarray):
            return (g, g)
        return apply_op("eltwise_sum", [a, b], a.data + b.data, bwd)
    if mode == "prod":
        ad, bd = a.data, b.data
        def bwd(g: np.ndarray):
            return (g * bd, g * ad)
        return apply_op("eltwise_prod", [a, b], ad * bd, bwd)
    raise ValueError(f"eltwise mode must be 'sum' or 'prod', got {mode!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return eltwise(a, b, "sum")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return eltwise(a, b, "prod")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g: np.ndarray):
        return (g * c,)

    return apply_op("scale", [x], x.data * c, bwd)


def reshape(x: Tensor, shape: Sequence[int] | int) -> Tensor:
    old = x.shape
    y = x.data.reshape(shape)

    def bwd(g: np.ndarray):
        return (g.reshape(old),)

    return apply_op("reshape", [x], y, bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return apply_op("transpose", [x], y, bwd)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows by integer index along ``axis``; duplicate indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"take expects a 1-d index list, got shape {idx.shape}")
    if x.ndim == 0:
        raise ValueError("take needs at least a 1-d tensor")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take index out of range for axis {axis} with size {n}")
    y = np.take(x.data, idx, axis=axis)
    shape = x.shape

    def bwd(g: np.ndarray):
        buf = np.zeros(shape, dtype=g.dtype)
        bm = np.moveaxis(buf, axis, 0)
        np.add.at(bm, idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return apply_op("take", [x], y, bwd)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements (0-d result)."""
    y = x.data.sum()
    shape, dt = x.shape, x.dtype

    def bwd(g: np.ndarray):
        return (np.full(shape, g, dtype=dt),)

    return apply_op("reduce_sum", [x], np.asarray(y), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of all elements (0-d result)."""
    y = x.data.mean()
    shape, dt, n = x.shape, x.dtype, x.size

    def bwd(g: np.ndarray):
        return (np.full(shape, g / n, dtype=dt),)

    return apply_op("reduce_mean", [x], np.asarray(y), bwd)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor | np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` maps the given tensors to any-shaped output; a fixed random
    projection turns it into a scalar so asymmetric errors cannot cancel.
    Returns the max relative error |a - n| / max(|a|, |n|, 1e-8) over all
    input elements.  Inputs are promoted to float64.
    """
    leaves = [
        Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64), requires_grad=True)
        for t in inputs
    ]
    rng = np.random.default_rng(seed)
    with GradTape() as tape:
        out = fn(*leaves)
        proj = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
        loss = reduce_sum(mul(out, proj)) if out.size != 1 else out
    grads = backward(loss, tape)

    def scalar_loss() -> float:
        res = fn(*leaves)
        if res.size == 1:
            return res.data.item()
        return float((res.data * proj.data).sum())

    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat = leaf.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar_loss()
            flat[i] = orig - eps
            lo = scalar_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.ravel()[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
