import math

import numpy as np
import pytest

from dpnet.metrics import (
    REPORT_COLUMNS, MetricsReport, ScoredBox, average_precision, map_eval, psnr, ssim, uiqm,
)
from dpnet.model import Detection

from reference import ap_instance, ap_oracle


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_exhaustive_pr_oracle(seed):
    preds, gts = ap_instance(seed)
    assert average_precision(preds, gts) == pytest.approx(ap_oracle(preds, gts), abs=1e-9)


def test_ap_known_values():
    gts = {0: np.array([[0.0, 0, 10, 10]])}
    tp = ScoredBox(0, 0.9, (0, 0, 10, 10))
    fp = ScoredBox(0, 0.95, (20, 20, 30, 30))
    assert average_precision([tp], gts) == 1.0
    assert average_precision([fp, tp], gts) == 0.5
    assert average_precision([], gts) == 0.0
    assert math.isnan(average_precision([tp], {0: np.zeros((0, 4))}))


def test_duplicate_detection_is_false_positive():
    gts = {0: np.array([[0.0, 0, 10, 10]])}
    preds = [ScoredBox(0, 0.9, (0, 0, 10, 10)), ScoredBox(0, 0.8, (0, 0, 10, 10))]
    assert average_precision(preds, gts) == 1.0
    preds = [ScoredBox(0, 0.9, (0, 0, 10, 10)), ScoredBox(0, 0.95, (0, 0, 10, 9))]
    assert average_precision(preds, gts) == 1.0


def test_ap_invariant_to_monotone_score_rescaling():
    preds, gts = ap_instance(3)
    rescaled = [ScoredBox(p.image, math.exp(5 * p.score) + 2, p.box) for p in preds]
    assert average_precision(preds, gts) == average_precision(rescaled, gts)


def test_map_mean_over_classes_with_gt_and_bounds():
    gt_boxes = [np.array([[0.0, 0, 10, 10], [20, 20, 30, 30]])]
    gt_classes = [np.array([0, 1])]
    dets = [[Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 1, 0.8)]]
    per_class, mean = map_eval(dets, gt_boxes, gt_classes, 3)
    assert per_class == {0: 1.0, 1: 0.0}
    assert mean == 0.5
    # relabelling the classes leaves the mean unchanged
    perm = {0: 2, 1: 0}
    _, mean2 = map_eval([[Detection(d.box, perm[d.class_id], d.score) for d in dets[0]]],
                        gt_boxes, [np.array([2, 0])], 3)
    assert mean2 == mean


def test_psnr_values(rng):
    x = rng.uniform(0, 0.9, (3, 8, 8))
    assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-6)
    assert psnr(x, x) == math.inf
    vals = [psnr(x + d, x) for d in (0.01, 0.02, 0.05)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_symmetry_bounds(rng):
    a, b = rng.uniform(0, 1, (3, 24, 24)), rng.uniform(0, 1, (3, 24, 24))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1
    assert ssim(a, a, window="block") == pytest.approx(1.0, abs=1e-9)


def test_ssim_matches_skimage(rng):
    skm = pytest.importorskip("skimage.metrics")
    a, b = rng.uniform(0, 1, (3, 32, 32)), rng.uniform(0, 1, (3, 32, 32))
    gray = np.array([0.299, 0.587, 0.114])
    ga, gb = np.tensordot(gray, a, 1), np.tensordot(gray, b, 1)
    ref = skm.structural_similarity(ga, gb, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, win_size=11)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_uiqm_terms(rng):
    flat = np.full((3, 32, 32), 0.5)
    parts = uiqm(flat)
    assert parts["uicm"] == 0.0 and parts["uism"] == 0.0 and parts["uiconm"] == 0.0
    img = rng.uniform(0, 1, (3, 32, 32))
    parts = uiqm(img)
    assert parts["uiqm"] == pytest.approx(0.0282 * parts["uicm"] + 0.2953 * parts["uism"] + 3.5753 * parts["uiconm"])
    # A blurred, contrast-compressed copy scores lower.
    dull = 0.5 + 0.2 * (img - 0.5)
    assert uiqm(dull)["uiqm"] < parts["uiqm"]


def test_report_tsv_header():
    rep = MetricsReport({"test/00000": {"psnr_enhanced": 20.0}}, {"circle": 0.5}, {"map": 0.5})
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == list(REPORT_COLUMNS)
    assert lines[1] == "image\ttest/00000\tpsnr_enhanced\t20.000000"
