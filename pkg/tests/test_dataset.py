"""Tests for the synthetic shapes dataset.

The rasterizer promises exact boxes: the set of painted pixels must touch
all four sides of the reported box and never leave it.  We check that by
recovering a bounding box from the rendered mask and comparing exactly.
"""

import numpy as np
import pytest

from essd.dataset import (
    CLASS_NAMES,
    LARGE_RANGE,
    SMALL_RANGE,
    SynthSample,
    render_shape,
    synth_dataset,
)
from essd.anchors import iou


def mask_bbox(before: np.ndarray, after: np.ndarray, size: int):
    """Normalized bounding box of every pixel the render changed."""
    changed = np.any(before != after, axis=0)
    ys, xs = np.nonzero(changed)
    return (
        xs.min() / size,
        ys.min() / size,
        (xs.max() + 1) / size,
        (ys.max() + 1) / size,
    )


class TestRenderShape:
    @pytest.mark.parametrize("cls", [0, 1, 2])
    def test_reported_box_matches_painted_pixels(self, cls):
        rng = np.random.default_rng(99 + cls)
        size = 96
        for _ in range(25):
            image = np.zeros((3, size, size), dtype=np.float32)
            side = int(rng.integers(8, 40))
            x0 = int(rng.integers(0, size - side))
            y0 = int(rng.integers(0, size - side))
            color = np.array([1.0, 0.5, 0.9], dtype=np.float32)
            before = image.copy()
            box = render_shape(image, cls, x0, y0, side, color)
            got = mask_bbox(before, image, size)
            want = box.corners
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_painted_pixels_take_the_color(self):
        image = np.zeros((3, 32, 32), dtype=np.float32)
        color = np.array([0.2, 0.9, 0.1], dtype=np.float32)
        render_shape(image, 1, 4, 6, 10, color)
        changed = np.any(image != 0, axis=0)
        assert changed.sum() == 100  # squares fill their whole box
        for c in range(3):
            np.testing.assert_allclose(image[c][changed], color[c])

    def test_unknown_class_rejected(self):
        image = np.zeros((3, 32, 32), dtype=np.float32)
        with pytest.raises(ValueError):
            render_shape(image, 3, 0, 0, 8, np.ones(3, dtype=np.float32))


class TestSynthDataset:
    def test_same_seed_bit_identical(self):
        a = synth_dataset(7, 6, 96)
        b = synth_dataset(7, 6, 96)
        assert len(a) == len(b) == 6
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            assert len(sa.gts) == len(sb.gts)
            for (box_a, cls_a), (box_b, cls_b) in zip(sa.gts, sb.gts):
                assert box_a == box_b and cls_a == cls_b

    def test_sample_independent_of_dataset_length(self):
        short = synth_dataset(3, 2, 96)
        long = synth_dataset(3, 5, 96)
        for i in range(2):
            np.testing.assert_array_equal(short[i].image, long[i].image)

    def test_different_seeds_differ(self):
        a = synth_dataset(0, 1, 96)[0]
        b = synth_dataset(1, 1, 96)[0]
        assert np.any(a.image != b.image)

    def test_shapes_and_ranges(self):
        lo = min(SMALL_RANGE[0], LARGE_RANGE[0])
        hi = max(SMALL_RANGE[1], LARGE_RANGE[1])
        for s in synth_dataset(11, 20, 96):
            assert s.image.shape == (3, 96, 96)
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert 1 <= len(s.gts) <= 3
            for box, cls in s.gts:
                assert 0 <= cls < len(CLASS_NAMES)
                x0, y0, x1, y1 = box.corners
                assert 0.0 <= x0 < x1 <= 1.0
                assert 0.0 <= y0 < y1 <= 1.0
                # rounding to pixels can nudge a hair past the nominal range
                assert lo - 0.05 <= max(box.w, box.h) <= hi + 0.05

    def test_pairwise_overlap_capped(self):
        for s in synth_dataset(23, 40, 96):
            for i in range(len(s.gts)):
                for j in range(i + 1, len(s.gts)):
                    assert iou(s.gts[i][0], s.gts[j][0]) <= 0.7 + 1e-9

    def test_gt_box_matches_rendered_extent(self):
        # single-shape images let the mask oracle apply end to end
        checked = 0
        for idx in range(60):
            s = synth_dataset(31, 60, 96)[idx]
            if len(s.gts) != 1:
                continue
            box, _ = s.gts[0]
            # the shape is the saturated region; background stays muted
            sat = np.any(s.image > 0.79, axis=0)
            ys, xs = np.nonzero(sat)
            if xs.size == 0:
                continue
            got = (xs.min() / 96, ys.min() / 96, (xs.max() + 1) / 96, (ys.max() + 1) / 96)
            np.testing.assert_allclose(got, box.corners, atol=1.5 / 96)
            checked += 1
        assert checked >= 5

    def test_class_histogram_roughly_uniform(self):
        counts = np.zeros(len(CLASS_NAMES), dtype=int)
        for s in synth_dataset(5, 400, 48):
            for _, cls in s.gts:
                counts[cls] += 1
        freq = counts / counts.sum()
        np.testing.assert_allclose(freq, 1 / 3, atol=0.05)

    def test_bad_args_rejected(self):
        with pytest.raises(ValueError):
            synth_dataset(0, 0, 96)
        with pytest.raises(ValueError):
            synth_dataset(0, 4, 0)
