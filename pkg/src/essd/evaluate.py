"""Detection post-processing and scoring: NMS, interpolated AP, mAP, latency.

Scoring follows the classic detection protocol: per-class greedy matching of
score-ranked detections against unmatched ground truth at IoU >= 0.5, with
11-point interpolated average precision by default (the continuous
area-under-envelope variant is available via ``method="area"``).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .anchors import AnchorSet, Box, decode_boxes, iou_matrix
from .dataset import SynthSample
from .graph import NetGraph, forward, head_predictions
from .weights import WeightStore

__all__ = [
    "Detection",
    "ClassAP",
    "EvalReport",
    "BenchReport",
    "nms",
    "decode_predictions",
    "average_precision",
    "evaluate_detections",
    "evaluate",
    "bench",
]

RECALL_POINTS = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class Detection:
    """One scored box; corners are normalized (x0, y0, x1, y1)."""

    class_id: int
    score: float
    corners: tuple[float, float, float, float]

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "score": round(self.score, 6),
            "box": [round(c, 6) for c in self.corners],
        }


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nms(corners: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.45) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in score order.

    Candidates are visited by descending score (ties toward the lower index)
    and suppressed when IoU with an already-kept box strictly exceeds the
    threshold, so boxes at exactly the threshold survive.
    """
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if corners.shape[0] != scores.shape[0]:
        raise ValueError(f"{corners.shape[0]} boxes vs {scores.shape[0]} scores")
    order = np.lexsort((np.arange(scores.size), -scores))
    kept: list[int] = []
    if scores.size == 0:
        return kept
    ious = iou_matrix(corners, corners)
    for i in order:
        if all(ious[i, j] <= iou_thresh for j in kept):
            kept.append(int(i))
    return kept


def decode_predictions(
    conf: np.ndarray,
    loc: np.ndarray,
    anchors: AnchorSet,
    score_thresh: float = 0.01,
    nms_thresh: float = 0.45,
    top_k: int = 100,
) -> list[Detection]:
    """Turn one image's raw head outputs into scored, suppressed detections.

    ``conf`` is (A, C+1) logits with background in column 0, ``loc`` is (A, 4)
    encoded offsets.  Per class: keep scores strictly above ``score_thresh``,
    decode and clip those anchors, keep the ``top_k`` best, then NMS.
    """
    conf = np.asarray(conf, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64)
    a = len(anchors)
    if conf.ndim != 2 or conf.shape[0] != a or loc.shape != (a, 4):
        raise ValueError(f"conf {conf.shape} / loc {loc.shape} inconsistent with {a} anchors")
    probs = _softmax_rows(conf)
    out: list[Detection] = []
    for cls in range(conf.shape[1] - 1):
        scores = probs[:, cls + 1]
        keep = np.flatnonzero(scores > score_thresh)
        if keep.size == 0:
            continue
        centers = decode_boxes(loc[keep], anchors.centers[keep])
        half = centers[:, 2:] / 2
        decoded = np.clip(
            np.concatenate([centers[:, :2] - half, centers[:, :2] + half], axis=1), 0.0, 1.0
        )
        cls_scores = scores[keep]
        order = np.lexsort((np.arange(cls_scores.size), -cls_scores))[:top_k]
        decoded, cls_scores = decoded[order], cls_scores[order]
        for i in nms(decoded, cls_scores, nms_thresh):
            out.append(Detection(cls, float(cls_scores[i]), tuple(float(v) for v in decoded[i])))
    out.sort(key=lambda d: -d.score)
    return out


def average_precision(
    scores: np.ndarray, is_tp: np.ndarray, num_gt: int, method: str = "11point"
) -> float:
    """AP from per-detection scores and true/false-positive flags.

    ``method="11point"`` averages the interpolated precision at recalls
    0.0, 0.1, ..., 1.0; ``method="area"`` integrates the precision envelope.
    """
    if method not in ("11point", "area"):
        raise ValueError(f"unknown AP method {method!r}")
    if num_gt < 1:
        raise ValueError("average precision needs at least one ground-truth box")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    is_tp = np.asarray(is_tp, dtype=bool).reshape(-1)
    if scores.shape != is_tp.shape:
        raise ValueError("scores and is_tp must have equal length")
    if scores.size == 0:
        return 0.0
    order = np.lexsort((np.arange(scores.size), -scores))
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if method == "11point":
        total = 0.0
        for r in RECALL_POINTS:
            above = precision[recall >= r - 1e-12]
            total += above.max() if above.size else 0.0
        return total / len(RECALL_POINTS)
    # area: envelope precision, integrate over recall steps
    r = np.concatenate(([0.0], recall, [1.0]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


@dataclass(frozen=True)
class ClassAP:
    class_id: int
    ap: float
    num_gt: int
    num_detections: int


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple[ClassAP, ...]
    mean_ap: float
    num_images: int
    iou_thresh: float
    method: str

    def to_json(self) -> dict:
        return {
            "mean_ap": round(self.mean_ap, 6),
            "iou_thresh": self.iou_thresh,
            "method": self.method,
            "num_images": self.num_images,
            "per_class": [
                {
                    "class_id": c.class_id,
                    "ap": round(c.ap, 6),
                    "num_gt": c.num_gt,
                    "num_detections": c.num_detections,
                }
                for c in self.per_class
            ],
        }


def _match_class(
    dets: list[tuple[int, float, np.ndarray]],
    gts_by_image: list[np.ndarray],
    iou_thresh: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP flags for one class: best unmatched gt at IoU >= thresh wins."""
    dets = sorted(dets, key=lambda d: (-d[1],))
    taken = [np.zeros(len(g), dtype=bool) for g in gts_by_image]
    scores = np.array([d[1] for d in dets], dtype=np.float64)
    flags = np.zeros(len(dets), dtype=bool)
    for i, (img, _, corners) in enumerate(dets):
        gts = gts_by_image[img]
        if gts.size == 0:
            continue
        ious = iou_matrix(corners.reshape(1, 4), gts)[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh and not taken[img][best]:
            taken[img][best] = True
            flags[i] = True
    return scores, flags


def evaluate_detections(
    detections: list[list[Detection]],
    gts: list[list[tuple[Box, int]]],
    num_classes: int,
    iou_thresh: float = 0.5,
    method: str = "11point",
) -> EvalReport:
    """Score per-image detection lists against ground truth; mAP skips empty classes."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists vs {len(gts)} ground-truth lists")
    per_class: list[ClassAP] = []
    aps: list[float] = []
    for cls in range(num_classes):
        gt_boxes = [
            np.array([b.corners for b, c in img_gts if c == cls], dtype=np.float64).reshape(-1, 4)
            for img_gts in gts
        ]
        num_gt = sum(len(g) for g in gt_boxes)
        dets = [
            (img, d.score, np.asarray(d.corners, dtype=np.float64))
            for img, img_dets in enumerate(detections)
            for d in img_dets
            if d.class_id == cls
        ]
        if num_gt == 0:
            per_class.append(ClassAP(cls, float("nan"), 0, len(dets)))
            continue
        scores, flags = _match_class(dets, gt_boxes, iou_thresh)
        ap = average_precision(scores, flags, num_gt, method)
        per_class.append(ClassAP(cls, ap, num_gt, len(dets)))
        aps.append(ap)
    mean_ap = float(np.mean(aps)) if aps else 0.0
    return EvalReport(tuple(per_class), mean_ap, len(gts), iou_thresh, method)


def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("ESSD_THREADS", "1"))
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def _infer_one(
    graph: NetGraph,
    store: WeightStore,
    anchors: AnchorSet,
    image: np.ndarray,
    score_thresh: float,
    nms_thresh: float,
    top_k: int,
) -> list[Detection]:
    outs = forward(graph, store, T.Tensor(image[None]), mode="eval")
    conf, loc = head_predictions(graph, outs)
    return decode_predictions(conf.data[0], loc.data[0], anchors, score_thresh, nms_thresh, top_k)


def evaluate(
    graph: NetGraph,
    store: WeightStore,
    samples: list[SynthSample],
    anchors: AnchorSet,
    score_thresh: float = 0.01,
    nms_thresh: float = 0.45,
    top_k: int = 100,
    iou_thresh: float = 0.5,
    method: str = "11point",
    threads: int | None = None,
) -> EvalReport:
    """Run the detector over ``samples`` and score it; images fan out over threads."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    num_classes = int(graph[graph.head_pairs()[0][1]].p("classes"))
    workers = _thread_count(threads)

    def job(sample: SynthSample) -> list[Detection]:
        return _infer_one(graph, store, anchors, sample.image, score_thresh, nms_thresh, top_k)

    if workers == 1:
        dets = [job(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            dets = list(pool.map(job, samples))
    return evaluate_detections(dets, [s.gts for s in samples], num_classes, iou_thresh, method)


@dataclass(frozen=True)
class BenchReport:
    mean_ms: float
    median_ms: float
    fps: float
    batch_size: int
    input_resolution: int
    iterations: int

    def to_json(self) -> dict:
        return {
            "mean_ms": round(self.mean_ms, 3),
            "median_ms": round(self.median_ms, 3),
            "fps": round(self.fps, 3),
            "batch_size": self.batch_size,
            "input_resolution": self.input_resolution,
            "iterations": self.iterations,
        }


def bench(
    graph: NetGraph,
    store: WeightStore,
    anchors: AnchorSet,
    image: np.ndarray,
    iterations: int = 10,
    warmup: int = 2,
) -> BenchReport:
    """Single-image latency of forward + decode + NMS (the deployment path)."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    for _ in range(warmup):
        _infer_one(graph, store, anchors, image, 0.01, 0.45, 100)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        _infer_one(graph, store, anchors, image, 0.01, 0.45, 100)
        times.append((time.perf_counter() - t0) * 1e3)
    mean_ms = float(np.mean(times))
    return BenchReport(
        mean_ms=mean_ms,
        median_ms=float(np.median(times)),
        fps=1e3 / mean_ms,
        batch_size=1,
        input_resolution=graph.input_size,
        iterations=iterations,
    )
