"""Box geometry: IoU, anchor grids, delta encoding and greedy NMS (numpy only)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LEVEL_STRIDES = (4, 8, 16)


def iou(box_a, box_b) -> float:
    """IoU of two (x_min, y_min, x_max, y_max) boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    if not (ax0 < ax1 and ay0 < ay1 and bx0 < bx1 and by0 < by1):
        raise ValueError(f"degenerate box in iou({box_a}, {box_b})")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (M,4) and (G,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class AnchorSet:
    """Anchors of every pyramid level, ordered (level, row, col, ratio)."""

    grids: list[tuple[int, int]]
    per_level: list[np.ndarray]
    strides: tuple[int, ...]

    @property
    def boxes(self) -> np.ndarray:
        return np.concatenate(self.per_level, axis=0)

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.per_level]

    def __len__(self) -> int:
        return sum(self.counts)


def level_grid(size: int, stride: int) -> int:
    return -(-size // stride)


def generate_anchors(
    height: int,
    width: int,
    sizes=(16.0, 32.0, 64.0),
    ratios=(0.5, 1.0, 2.0),
    strides=LEVEL_STRIDES,
) -> AnchorSet:
    """Anchors centred on feature cells; ratio r means width/height = r at area size²."""
    if height % 8 or width % 8:
        raise ShapeError(f"image extent {height}×{width} must be divisible by 8")
    grids, per_level = [], []
    for size, stride in zip(sizes, strides):
        gh, gw = level_grid(height, stride), level_grid(width, stride)
        cy = (np.arange(gh) + 0.5) * stride
        cx = (np.arange(gw) + 0.5) * stride
        ws = np.array([size * np.sqrt(r) for r in ratios])
        hs = np.array([size / np.sqrt(r) for r in ratios])
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        centers_x = cxx[:, :, None]
        centers_y = cyy[:, :, None]
        boxes = np.stack(
            [centers_x - ws / 2, centers_y - hs / 2, centers_x + ws / 2, centers_y + hs / 2], axis=-1
        )
        grids.append((gh, gw))
        per_level.append(boxes.reshape(-1, 4))
    return AnchorSet(grids, per_level, tuple(strides))


def encode(anchors: np.ndarray, gt: np.ndarray, std=(0.1, 0.1, 0.2, 0.2)) -> np.ndarray:
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    xg = gt[:, 0] + 0.5 * wg
    yg = gt[:, 1] + 0.5 * hg
    deltas = np.stack([(xg - xa) / wa, (yg - ya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1)
    return deltas / np.asarray(std)


_MAX_DLOG = np.log(1000.0 / 16)


def decode(anchors: np.ndarray, deltas: np.ndarray, std=(0.1, 0.1, 0.2, 0.2)) -> np.ndarray:
    """Inverse of ``encode``: x̂ = x_a + dx·w_a, ŵ = w_a·exp(dw) (after undoing ``std``)."""
    d = deltas * np.asarray(std)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    x = xa + d[:, 0] * wa
    y = ya + d[:, 1] * ha
    w = wa * np.exp(np.minimum(d[:, 2], _MAX_DLOG))
    h = ha * np.exp(np.minimum(d[:, 3], _MAX_DLOG))
    return np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    order = np.argsort(-scores, kind="stable")
    boxes = boxes[order]
    # Degenerate (clipped to zero area) boxes never suppress anything.
    ious = iou_matrix(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    ious = np.nan_to_num(ious, nan=0.0)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed[i + 1 :] |= ious[i, i + 1 :] > iou_thresh
    return np.asarray(keep, dtype=np.int64)
