from fractions import Fraction

import numpy as np
import pytest

from dpnet.boxes import decode, encode, generate_anchors, iou, iou_matrix, nms
from dpnet.errors import ShapeError

from reference import iou_rational


def test_iou_unit_overlap_is_one_seventh():
    assert iou_rational((0, 0, 2, 2), (1, 1, 3, 3)) == Fraction(1, 7)
    assert Fraction(iou((0, 0, 2, 2), (1, 1, 3, 3))).limit_denominator(1000) == Fraction(1, 7)
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7


def test_iou_matrix_matches_rational_oracle(rng):
    a = rng.integers(0, 20, (6, 2)).astype(float)
    a = np.concatenate([a, a + rng.integers(1, 10, (6, 2))], axis=1)
    b = rng.integers(0, 20, (5, 2)).astype(float)
    b = np.concatenate([b, b + rng.integers(1, 10, (5, 2))], axis=1)
    m = iou_matrix(a, b)
    for i in range(6):
        for j in range(5):
            assert m[i, j] == pytest.approx(float(iou_rational(a[i], b[j])), abs=1e-15)


def test_iou_disjoint_and_degenerate():
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    with pytest.raises(ValueError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))


def _nms_oracle(boxes, scores, thresh):
    """Repeatedly take the best remaining box and drop everything overlapping it too much."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        keep.append(best)
        remaining = [i for i in remaining if i != best and float(iou_rational(boxes[best], boxes[i])) <= thresh]
    return keep


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    xy = r.integers(0, 30, (15, 2)).astype(float)
    boxes = np.concatenate([xy, xy + r.integers(2, 15, (15, 2))], axis=1)
    scores = r.integers(0, 8, 15) / 8.0
    assert nms(boxes, scores, 0.5).tolist() == _nms_oracle(boxes, scores, 0.5)


def test_encode_decode_round_trip(rng):
    anchors = generate_anchors(32, 32).boxes[:20]
    gt = anchors + rng.uniform(-2, 2, anchors.shape)
    np.testing.assert_allclose(decode(anchors, encode(anchors, gt)), gt, atol=1e-10)


def test_anchor_grids_follow_strides():
    a = generate_anchors(96, 64)
    assert a.grids == [(24, 16), (12, 8), (6, 4)]
    assert len(a) == 3 * (24 * 16 + 12 * 8 + 6 * 4)
    first = a.per_level[0][:3]
    centre = (first[:, :2] + first[:, 2:]) / 2
    np.testing.assert_allclose(centre, [[2, 2]] * 3)
    areas = (first[:, 2] - first[:, 0]) * (first[:, 3] - first[:, 1])
    np.testing.assert_allclose(areas, 256.0)
    with pytest.raises(ShapeError):
        generate_anchors(20, 16)
