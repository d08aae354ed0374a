import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from detmoe.geometry import Box, Detection, area, iou, iou_matrix, iou_one_to_many

coord = st.floats(min_value=-100, max_value=100, allow_nan=False)


@st.composite
def boxes(draw, positive=False):
    x, y = draw(coord), draw(coord)
    lo = 0.5 if positive else 0.0
    w = draw(st.floats(min_value=lo, max_value=50))
    h = draw(st.floats(min_value=lo, max_value=50))
    return Box(x, y, x + w, y + h)


class TestBox:
    def test_rejects_negative_extent(self):
        with pytest.raises(ValueError):
            Box(2, 0, 1, 1)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Box(0, 0, math.inf, 1)

    def test_zero_area_allowed(self):
        assert area(Box(1, 1, 1, 5)) == 0

    @pytest.mark.parametrize("coords,expected", [
        ((0, 0, 2, 2), 4.0),
        ((1, 1, 1, 5), 0.0),
        ((0.5, 0.5, 3.5, 2.0), 4.5),
    ])
    def test_area(self, coords, expected):
        assert area(Box(*coords)) == pytest.approx(expected)


class TestDetection:
    def test_score_bounds(self):
        with pytest.raises(ValueError):
            Detection("a", 0, 1.5, Box(0, 0, 1, 1))

    def test_negative_class(self):
        with pytest.raises(ValueError):
            Detection("a", -1, 0.5, Box(0, 0, 1, 1))

    def test_replace_keeps_other_fields(self):
        d = Detection("a", 2, 0.5, Box(0, 0, 1, 1), "day")
        r = d.replace(score=0.25)
        assert (r.image_id, r.class_id, r.score, r.box, r.source) == ("a", 2, 0.25, d.box, "day")


class TestIoU:
    def test_identical(self):
        assert iou(Box(0, 0, 3, 3), Box(0, 0, 3, 3)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_partial_overlap(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_zero_union(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes(positive=True))
    def test_self_overlap(self, a):
        assert iou(a, a) == pytest.approx(1.0)

    @given(boxes(positive=True), boxes(positive=True), st.floats(-50, 50), st.floats(-50, 50))
    def test_translation_invariant(self, a, b, dx, dy):
        assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(iou(a, b), abs=1e-9)

    def test_vectorised_paths_agree(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 50, (40, 2))
        wh = rng.uniform(0, 20, (40, 2))
        arr = np.hstack([xy, xy + wh])
        m = iou_matrix(arr, arr)
        for i in range(len(arr)):
            row = iou_one_to_many(arr[i], arr)
            ref = [iou(Box(*arr[i]), Box(*b)) for b in arr]
            np.testing.assert_array_equal(row, ref)
            np.testing.assert_allclose(m[i], ref, rtol=0, atol=1e-15)
