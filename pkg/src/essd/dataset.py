"""Synthetic detection data: filled shapes on textured backgrounds.

Each image carries 1-3 axis-aligned filled shapes (circle, square, triangle)
drawn without anti-aliasing on integer pixel grids, so every ground-truth box
is exactly the rendered extent.  Sizes span 8%-45% of the image side with
half of the draws biased small, and no two boxes in one image overlap with
IoU > 0.7.  Sample i depends only on (seed, i), never on how many samples
are requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import Box, iou

__all__ = ["SynthSample", "synth_dataset", "render_shape", "CLASS_NAMES"]

CLASS_NAMES = ("circle", "square", "triangle")
SMALL_RANGE = (0.08, 0.20)
LARGE_RANGE = (0.20, 0.45)


@dataclass
class SynthSample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    gts: list[tuple[Box, int]]

    @property
    def image_size(self) -> int:
        return self.image.shape[1]


def render_shape(image: np.ndarray, cls: int, x0: int, y0: int, size_px: int, color: np.ndarray) -> Box:
    """Fill one shape into (3, S, S) ``image``; returns its exact normalized box.

    Circles use an even diameter and cover pixels whose centers fall inside
    the disc; triangles are integer staircases with a full-width base row, so
    both touch every row/column of their bounding box.
    """
    s = image.shape[1]
    col = np.asarray(color, dtype=np.float32).reshape(3, 1)
    if cls == 1:  # square
        a = size_px
        image[:, y0 : y0 + a, x0 : x0 + a] = col[:, :, None]
        w = a
        h = a
    elif cls == 0:  # circle
        d = size_px - (size_px % 2)  # even diameter
        r = d / 2.0
        cx, cy = x0 + r, y0 + r
        ys, xs = np.mgrid[y0 : y0 + d, x0 : x0 + d]
        mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
        image[:, y0 : y0 + d, x0 : x0 + d][:, mask] = col
        w = d
        h = d
    elif cls == 2:  # upward triangle
        w = h = size_px
        for t in range(h):
            lo = ((h - 1 - t) * (w - 1)) // (2 * (h - 1))
            image[:, y0 + t, x0 + lo : x0 + w - lo] = col
    else:
        raise ValueError(f"unknown shape class {cls}")
    return Box.from_corners(x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s)


def _background(rng: np.random.Generator, s: int) -> np.ndarray:
    base = rng.uniform(0.30, 0.55, (3, 1, 1)).astype(np.float32)
    tile = max(4, s // 12)
    g = -(-s // tile)  # ceil
    noise = rng.uniform(-0.07, 0.07, (3, g, g)).astype(np.float32)
    noise = np.kron(noise, np.ones((tile, tile), dtype=np.float32))[:, :s, :s]
    ramp = np.linspace(-0.04, 0.04, s, dtype=np.float32).reshape(1, s, 1)
    return np.clip(base + noise + ramp, 0.0, 1.0)


def _shape_color(rng: np.random.Generator) -> np.ndarray:
    # saturated channels only: each far from the muted background band
    hi = rng.integers(0, 2, 3).astype(bool)
    if not hi.any():
        hi[rng.integers(0, 3)] = True
    col = np.where(hi, rng.uniform(0.80, 1.0, 3), rng.uniform(0.0, 0.15, 3))
    return col.astype(np.float32)


def _make_sample(seed: int, index: int, image_size: int) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    s = image_size
    image = _background(rng, s)
    gts: list[tuple[Box, int]] = []
    for _ in range(int(rng.integers(1, 4))):
        for _attempt in range(40):
            cls = int(rng.integers(0, 3))
            lo, hi = SMALL_RANGE if rng.random() < 0.5 else LARGE_RANGE
            frac = rng.uniform(lo, hi)
            size_px = max(4, round(frac * s))
            size_px -= size_px % 2 if cls == 0 else 0
            if size_px > s:
                continue
            x0 = int(rng.integers(0, s - size_px + 1))
            y0 = int(rng.integers(0, s - size_px + 1))
            cand = Box.from_corners(x0 / s, y0 / s, (x0 + size_px) / s, (y0 + size_px) / s)
            if all(iou(cand, b) <= 0.7 for b, _ in gts):
                box = render_shape(image, cls, x0, y0, size_px, _shape_color(rng))
                gts.append((box, cls))
                break
    return SynthSample(image=image, gts=gts)


def synth_dataset(seed: int, n_images: int, image_size: int) -> list[SynthSample]:
    """Deterministic sample list; bit-identical for equal (seed, n, size)."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    return [_make_sample(seed, i, image_size) for i in range(n_images)]
