"""Image quality (PSNR, SSIM, UIQM) and detection (IoU, AP, mAP) metrics in plain numpy."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .boxes import iou, iou_matrix  # noqa: F401  (iou is part of this module's surface)
from .errors import ShapeError

GRAY = np.array([0.299, 0.587, 0.114])
UIQM_WEIGHTS = (0.0282, 0.2953, 3.5753)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, max_val: float = 1.0) -> float:
    """10·log10(max²/MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(GRAY, img, axes=1)
    raise ShapeError(f"expected H×W or 3×H×W image, got {img.shape}")


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: str = "gaussian", k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM on grayscale; ``gaussian`` = 11×11 σ 1.5 sliding, ``block`` = 8×8 non-overlapping."""
    x, y = to_gray(a), to_gray(b)
    _check_same(x, y)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if window == "gaussian":
        size = 11
        if min(x.shape) < size:
            raise ShapeError(f"image {x.shape} smaller than the {size}×{size} window")
        kern = gaussian_kernel(size)

        def filt(z):
            return np.einsum("ijkl,kl->ij", sliding_window_view(z, (size, size)), kern)

    elif window == "block":
        size = 8
        if min(x.shape) < size:
            raise ShapeError(f"image {x.shape} smaller than the {size}×{size} window")
        h, w = (x.shape[0] // size) * size, (x.shape[1] // size) * size

        def filt(z):
            return z[:h, :w].reshape(h // size, size, w // size, size).mean(axis=(1, 3))

    else:
        raise ValueError(f"unknown SSIM window {window!r}")
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------- UIQM
def _trimmed_mean(x: np.ndarray, alpha: float = 0.1) -> float:
    s = np.sort(x.ravel())
    cut = int(math.ceil(alpha * s.size))
    kept = s[cut : s.size - cut]
    return float(kept.mean()) if kept.size else float(s.mean())


def uicm(rgb255: np.ndarray) -> float:
    r, g, b = rgb255
    rg = r - g
    yb = (r + g) / 2 - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(var_rg + var_yb)


def _blocks(x: np.ndarray, size: int) -> np.ndarray:
    h, w = (x.shape[0] // size) * size, (x.shape[1] // size) * size
    return x[:h, :w].reshape(h // size, size, w // size, size).transpose(0, 2, 1, 3).reshape(-1, size * size)


def eme(x: np.ndarray, size: int = 8) -> float:
    """(2/k) Σ_blocks log(max/min); blocks with a zero extreme contribute nothing."""
    blocks = _blocks(x, size)
    hi, lo = blocks.max(axis=1), blocks.min(axis=1)
    ok = (hi > 0) & (lo > 0)
    return 2.0 / len(blocks) * float(np.sum(np.log(hi[ok] / lo[ok])))


def _sobel_magnitude(x: np.ndarray) -> np.ndarray:
    mag = np.hypot(ndimage.sobel(x, axis=0), ndimage.sobel(x, axis=1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def uism(rgb255: np.ndarray, size: int = 8) -> float:
    return float(sum(w * eme(_sobel_magnitude(c) * c, size) for w, c in zip(GRAY, rgb255)))


def uiconm(rgb255: np.ndarray, size: int = 8) -> float:
    """-(1/k) Σ_blocks c·log(c) with block contrast c = (max-min)/(max+min) of the intensity."""
    blocks = _blocks(np.tensordot(GRAY, rgb255, axes=1), size)
    hi, lo = blocks.max(axis=1), blocks.min(axis=1)
    top, bot = hi - lo, hi + lo
    ok = (top > 0) & (bot > 0)
    c = top[ok] / bot[ok]
    return 0.0 - float(np.sum(c * np.log(c))) / len(blocks)


def uiqm(img, weights: Sequence[float] = UIQM_WEIGHTS, block: int = 8) -> dict[str, float]:
    """Colourfulness, sharpness and contrast terms of a 3×H×W image in [0,1] plus their weighted sum."""
    rgb = np.asarray(img, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"uiqm expects a 3×H×W image, got {rgb.shape}")
    rgb255 = rgb * 255.0
    parts = {"uicm": uicm(rgb255), "uism": uism(rgb255, block), "uiconm": uiconm(rgb255, block)}
    c1, c2, c3 = weights
    parts["uiqm"] = c1 * parts["uicm"] + c2 * parts["uism"] + c3 * parts["uiconm"]
    return parts


# ---------------------------------------------------------------- detection
@dataclass(frozen=True)
class ScoredBox:
    image: object
    score: float
    box: tuple[float, float, float, float]


@dataclass
class EvalMatch:
    """Predictions in descending score order with TP flags and matched GT (or -1)."""

    order: list[ScoredBox]
    tp: np.ndarray
    matched_gt: np.ndarray
    num_gt: int


def match_detections(preds: Iterable[ScoredBox], gts: Mapping[object, np.ndarray], iou_thresh: float = 0.5) -> EvalMatch:
    """Greedy by score: each prediction takes its highest-IoU GT, a TP only if still unmatched."""
    order = sorted(preds, key=lambda p: -p.score)
    used = {k: np.zeros(len(np.asarray(v).reshape(-1, 4)), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    matched = np.full(len(order), -1)
    for i, p in enumerate(order):
        g = np.asarray(gts.get(p.image, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        if len(g) == 0:
            continue
        ious = np.nan_to_num(iou_matrix(np.asarray([p.box]), g)[0], nan=0.0)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not used[p.image][j]:
            used[p.image][j] = True
            tp[i] = True
            matched[i] = j
    num_gt = sum(len(np.asarray(v).reshape(-1, 4)) for v in gts.values())
    return EvalMatch(order, tp, matched, num_gt)


def average_precision(preds: Iterable[ScoredBox], gts: Mapping[object, np.ndarray], iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP for one class; NaN when there is no GT."""
    m = match_detections(preds, gts, iou_thresh)
    if m.num_gt == 0:
        return math.nan
    if len(m.tp) == 0:
        return 0.0
    tp = np.cumsum(m.tp)
    fp = np.cumsum(~m.tp)
    recall = tp / m.num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_eval(
    detections: Sequence[Sequence],
    gt_boxes: Sequence[np.ndarray],
    gt_classes: Sequence[np.ndarray],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean over classes that have at least one GT box.

    ``detections[i]`` holds objects with ``box``, ``class_id`` and ``score`` for image i.
    """
    per_class: dict[int, float] = {}
    for k in range(num_classes):
        gts = {i: np.asarray(b, dtype=np.float64).reshape(-1, 4)[np.asarray(c) == k] for i, (b, c) in enumerate(zip(gt_boxes, gt_classes))}
        preds = [ScoredBox(i, d.score, tuple(d.box)) for i, dets in enumerate(detections) for d in dets if d.class_id == k]
        ap = average_precision(preds, gts, iou_thresh)
        if not math.isnan(ap):
            per_class[k] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


# ------------------------------------------------------------------- report
REPORT_COLUMNS = ("kind", "name", "metric", "value")


@dataclass
class MetricsReport:
    """Per-image enhancement scores, per-class AP and aggregates."""

    images: dict[str, dict[str, float]] = field(default_factory=dict)
    class_ap: dict[str, float] = field(default_factory=dict)
    summary: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = []
        for name, vals in self.images.items():
            out += [("image", name, k, v) for k, v in vals.items()]
        out += [("class", name, "ap", v) for name, v in self.class_ap.items()]
        out += [("summary", "all", k, v) for k, v in self.summary.items()]
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for kind, name, metric, value in self.rows():
            writer.writerow([kind, name, metric, format_metric(value)])
        return buf.getvalue()


def format_metric(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"
