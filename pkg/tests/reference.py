"""Independent reference implementations used as test oracles."""
from fractions import Fraction

import numpy as np

from dpnet.metrics import ScoredBox


def iou_rational(a, b):
    a, b = [Fraction(v) for v in a], [Fraction(v) for v in b]
    iw = max(Fraction(0), min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(Fraction(0), min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def ap_oracle(preds, gts, thresh=0.5):
    """Exhaustive PR curve in rationals: evaluate every cut-off, then integrate the upper envelope."""
    preds = sorted(preds, key=lambda p: -p.score)
    used = {k: [False] * len(v) for k, v in gts.items()}
    hits = []
    for p in preds:
        g = gts.get(p.image, [])
        best_j, best_q = -1, Fraction(-1)
        for j, box in enumerate(g):
            q = iou_rational(p.box, box)
            if q > best_q:
                best_j, best_q = j, q
        ok = best_j >= 0 and best_q >= Fraction(thresh) and not used[p.image][best_j]
        if ok:
            used[p.image][best_j] = True
        hits.append(ok)
    total = sum(len(v) for v in gts.values())
    points = []
    for cut in range(1, len(hits) + 1):
        tp = sum(hits[:cut])
        points.append((Fraction(tp, total), Fraction(tp, cut)))
    ap, prev_r = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == prev_r:
            continue
        env = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * env
        prev_r = r
    return float(ap)


def ap_instance(seed):
    r = np.random.default_rng(seed)
    gts, preds = {}, []
    for img in range(r.integers(1, 4)):
        n = r.integers(0, 4)
        xy = r.integers(0, 20, (n, 2))
        boxes = np.concatenate([xy, xy + r.integers(3, 10, (n, 2))], axis=1).astype(float)
        gts[img] = boxes
        for b in boxes:
            for _ in range(r.integers(0, 3)):
                shift = np.tile(r.integers(-2, 3, 2), 2) + np.array([0, 0, *r.integers(0, 3, 2)])
                preds.append(ScoredBox(img, float(r.integers(1, 20)) / 20, tuple(b + shift)))
        for _ in range(r.integers(0, 3)):
            xy = r.integers(0, 20, 2)
            preds.append(ScoredBox(img, float(r.integers(1, 20)) / 20, (*xy, *(xy + 5))))
    if sum(len(v) for v in gts.values()) == 0:
        gts[0] = np.array([[0.0, 0.0, 4.0, 4.0]])
    # distinct scores so the ordering (and the oracle) is unambiguous
    preds = [ScoredBox(p.image, p.score + i * 1e-6, tuple(float(v) for v in p.box)) for i, p in enumerate(preds)]
    return preds, gts
