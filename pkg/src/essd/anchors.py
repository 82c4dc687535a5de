"""Default-box geometry: anchor grids, IoU, offset coding, and gt matching.

All coordinates are normalized to [0, 1].  Boxes travel in center form
(cx, cy, w, h); corner form (xmin, ymin, xmax, ymax) is derived on demand.
Anchor order is scale-major, then row-major over grid cells, then aspect
ratio, which must agree with how prediction heads flatten their output maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Box",
    "AnchorSet",
    "MatchResult",
    "DEFAULT_VARIANCES",
    "iou",
    "iou_matrix",
    "generate_anchors",
    "encode",
    "decode",
    "encode_boxes",
    "decode_boxes",
    "match",
]

DEFAULT_VARIANCES = (0.1, 0.1, 0.2, 0.2)


@dataclass(frozen=True)
class Box:
    """A rectangle in center form."""

    cx: float
    cy: float
    w: float
    h: float

    @staticmethod
    def from_corners(xmin: float, ymin: float, xmax: float, ymax: float) -> "Box":
        return Box((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin, ymax - ymin)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when the union is empty."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def iou_matrix(a_corners: np.ndarray, b_corners: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays, shape (len(a), len(b))."""
    a = np.asarray(a_corners, dtype=np.float64)
    b = np.asarray(b_corners, dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


@dataclass(frozen=True)
class AnchorSet:
    """All default boxes of a detector, plus per-scale layout metadata."""

    centers: np.ndarray  # (A, 4) center form, clipped to the image
    corners: np.ndarray  # (A, 4) corner form of the same boxes
    grid_sizes: tuple[int, ...]
    scales: tuple[float, ...]
    ratios: tuple[tuple[float, ...], ...]

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def boxes_per_cell(self) -> tuple[int, ...]:
        return tuple(len(r) for r in self.ratios)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(g * g * len(r) for g, r in zip(self.grid_sizes, self.ratios))

    def box(self, i: int) -> Box:
        cx, cy, w, h = self.centers[i]
        return Box(float(cx), float(cy), float(w), float(h))


def generate_anchors(
    scales: Sequence[float],
    aspect_ratios: Sequence[Sequence[float]],
    grid_sizes: Sequence[int],
) -> AnchorSet:
    """Lay out default boxes of size (s*sqrt(r), s/sqrt(r)) on each grid.

    Cell (i, j) of an S x S grid centers its boxes at ((j+0.5)/S, (i+0.5)/S).
    Boxes are clipped to the unit square in corner form.
    """
    if not (len(scales) == len(aspect_ratios) == len(grid_sizes)):
        raise ValueError(
            f"scales ({len(scales)}), aspect_ratios ({len(aspect_ratios)}) and "
            f"grid_sizes ({len(grid_sizes)}) must have equal length"
        )
    rows = []
    for s, ratios, g in zip(scales, aspect_ratios, grid_sizes):
        if not 0.0 < s <= 1.0:
            raise ValueError(f"anchor scale {s} outside (0, 1]")
        if g < 1:
            raise ValueError(f"grid size {g} must be >= 1")
        if not ratios:
            raise ValueError("each scale needs at least one aspect ratio")
        wh = np.array([(s * math.sqrt(r), s / math.sqrt(r)) for r in ratios])
        cs = (np.arange(g) + 0.5) / g
        cyx = np.stack(np.meshgrid(cs, cs, indexing="ij"), axis=-1)  # (g, g, [cy, cx])
        block = np.empty((g, g, len(ratios), 4))
        block[..., 0] = cyx[:, :, None, 1]
        block[..., 1] = cyx[:, :, None, 0]
        block[..., 2] = wh[None, None, :, 0]
        block[..., 3] = wh[None, None, :, 1]
        rows.append(block.reshape(-1, 4))
    centers = np.concatenate(rows, axis=0)
    half = centers[:, 2:] / 2.0
    corners = np.concatenate([centers[:, :2] - half, centers[:, :2] + half], axis=1)
    corners = np.clip(corners, 0.0, 1.0)
    centers = np.concatenate(
        [(corners[:, :2] + corners[:, 2:]) / 2.0, corners[:, 2:] - corners[:, :2]], axis=1
    )
    return AnchorSet(
        centers=centers.astype(np.float32),
        corners=corners.astype(np.float32),
        grid_sizes=tuple(int(g) for g in grid_sizes),
        scales=tuple(float(s) for s in scales),
        ratios=tuple(tuple(float(r) for r in rs) for rs in aspect_ratios),
    )


def encode_boxes(
    gt_centers: np.ndarray, anchor_centers: np.ndarray, variances=DEFAULT_VARIANCES
) -> np.ndarray:
    """Center-form gt boxes -> regression offsets relative to matching anchors."""
    g = np.asarray(gt_centers, dtype=np.float64)
    a = np.asarray(anchor_centers, dtype=np.float64)
    out = np.empty_like(g)
    out[..., 0] = (g[..., 0] - a[..., 0]) / (variances[0] * a[..., 2])
    out[..., 1] = (g[..., 1] - a[..., 1]) / (variances[1] * a[..., 3])
    out[..., 2] = np.log(g[..., 2] / a[..., 2]) / variances[2]
    out[..., 3] = np.log(g[..., 3] / a[..., 3]) / variances[3]
    return out.astype(np.float32)


def decode_boxes(
    offsets: np.ndarray, anchor_centers: np.ndarray, variances=DEFAULT_VARIANCES
) -> np.ndarray:
    """Regression offsets -> center-form boxes (inverse of :func:`encode_boxes`)."""
    o = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchor_centers, dtype=np.float64)
    out = np.empty_like(o)
    out[..., 0] = o[..., 0] * variances[0] * a[..., 2] + a[..., 0]
    out[..., 1] = o[..., 1] * variances[1] * a[..., 3] + a[..., 1]
    out[..., 2] = np.exp(o[..., 2] * variances[2]) * a[..., 2]
    out[..., 3] = np.exp(o[..., 3] * variances[3]) * a[..., 3]
    return out.astype(np.float32)


def encode(gt: Box, anchor: Box, variances=DEFAULT_VARIANCES) -> np.ndarray:
    """Offsets (4,) that regress ``anchor`` onto ``gt``."""
    if gt.w <= 0 or gt.h <= 0 or anchor.w <= 0 or anchor.h <= 0:
        raise ValueError("encode requires positive box extents")
    return encode_boxes(
        np.array([[gt.cx, gt.cy, gt.w, gt.h]]), np.array([[anchor.cx, anchor.cy, anchor.w, anchor.h]]), variances
    )[0]


def decode(offsets: np.ndarray, anchor: Box, variances=DEFAULT_VARIANCES) -> Box:
    """Apply offsets (4,) to ``anchor``; exact inverse of :func:`encode`."""
    c = decode_boxes(
        np.asarray(offsets, dtype=np.float64).reshape(1, 4),
        np.array([[anchor.cx, anchor.cy, anchor.w, anchor.h]]),
        variances,
    )[0]
    return Box(float(c[0]), float(c[1]), float(c[2]), float(c[3]))


@dataclass
class MatchResult:
    """Per-anchor assignment: class id (-1 = background), gt index, loc targets."""

    class_ids: np.ndarray  # (A,) int32
    gt_index: np.ndarray  # (A,) int32, -1 where background
    loc_targets: np.ndarray  # (A, 4) float32, zeros where background

    @property
    def num_pos(self) -> int:
        return int((self.class_ids >= 0).sum())

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.class_ids >= 0)


def match(
    anchors: AnchorSet,
    gts: Sequence[tuple[Box, int]],
    threshold: float = 0.5,
    variances=DEFAULT_VARIANCES,
) -> MatchResult:
    """Assign ground-truth boxes to anchors the two-stage way.

    Stage 1 greedily pairs each gt with its best remaining anchor so every gt
    owns at least one anchor regardless of overlap.  Stage 2 additionally
    assigns every unclaimed anchor whose best-gt IoU reaches ``threshold``.
    Ties break toward the lowest index.
    """
    a = len(anchors)
    class_ids = np.full(a, -1, dtype=np.int32)
    gt_index = np.full(a, -1, dtype=np.int32)
    loc = np.zeros((a, 4), dtype=np.float32)
    if not gts:
        return MatchResult(class_ids, gt_index, loc)
    for _, cls in gts:
        if cls < 0:
            raise ValueError(f"gt class ids must be >= 0, got {cls}")
    gt_centers = np.array([[b.cx, b.cy, b.w, b.h] for b, _ in gts], dtype=np.float64)
    half = gt_centers[:, 2:] / 2.0
    gt_corners = np.concatenate([gt_centers[:, :2] - half, gt_centers[:, :2] + half], axis=1)
    m = iou_matrix(anchors.corners, gt_corners)  # (A, G)
    work = m.copy()
    # when gts outnumber anchors only min(A, G) forced pairs exist
    for _ in range(min(len(gts), a)):
        flat = int(work.argmax())
        ai, gi = divmod(flat, work.shape[1])
        gt_index[ai] = gi
        class_ids[ai] = gts[gi][1]
        work[ai, :] = -1.0  # anchor consumed
        work[:, gi] = -1.0  # gt satisfied
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(a), best_gt]
    free = gt_index < 0
    hit = free & (best_iou >= threshold)
    gt_index[hit] = best_gt[hit]
    class_ids[hit] = np.array([gts[g][1] for g in best_gt[hit]], dtype=np.int32)
    pos = gt_index >= 0
    loc[pos] = encode_boxes(gt_centers[gt_index[pos]], anchors.centers[pos].astype(np.float64), variances)
    return MatchResult(class_ids, gt_index, loc)
