"""Detection (focal + smooth-L1), enhancement and joint training losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import BatchNormState, Tensor, conv2d
from .autodiff.tensor import record_branch
from .boxes import AnchorSet, encode, generate_anchors, iou_matrix
from .config import LossConfig, ModelConfig
from .errors import ShapeError
from .model import DPNetParams, detect_forward, enhance_forward, flatten_levels, shared_forward

IGNORE = -2
NEGATIVE = -1

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class AnchorTargets:
    """Per-anchor labels (class id, NEGATIVE or IGNORE), matched GT index and box targets.

    Arrays may carry a leading batch axis after ``stack``.
    """

    labels: np.ndarray
    matched: np.ndarray
    box_targets: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def stack(cls, items: list["AnchorTargets"]) -> "AnchorTargets":
        return cls(
            np.stack([t.labels for t in items]),
            np.stack([t.matched for t in items]),
            np.stack([t.box_targets for t in items]),
        )


def match_anchors(
    anchors: AnchorSet | np.ndarray,
    gt_boxes,
    gt_classes,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
    box_std=(0.1, 0.1, 0.2, 0.2),
) -> AnchorTargets:
    """Assign every anchor to its highest-IoU GT (lowest GT index on ties).

    IoU >= pos_iou is positive, < neg_iou negative, in between ignored. The
    best anchor of each GT (lowest anchor index on ties) is then made positive
    even below pos_iou, keeping its own highest-IoU assignment.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    m = len(boxes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    labels = np.full(m, NEGATIVE, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    targets = np.zeros((m, 4))
    if len(gt_boxes) == 0:
        return AnchorTargets(labels, matched, targets)
    if np.any(gt_boxes[:, 2] <= gt_boxes[:, 0]) or np.any(gt_boxes[:, 3] <= gt_boxes[:, 1]):
        raise ValueError("ground-truth boxes must satisfy min < max")

    ious = np.nan_to_num(iou_matrix(boxes, gt_boxes), nan=0.0)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(m), best_gt]
    positive = best_iou >= pos_iou
    labels[(best_iou >= neg_iou) & ~positive] = IGNORE

    best_anchor = ious.argmax(axis=0)
    forced = best_anchor[ious[best_anchor, np.arange(len(gt_boxes))] > 0]
    positive[forced] = True

    pos = np.nonzero(positive)[0]
    labels[pos] = gt_classes[best_gt[pos]]
    matched[pos] = best_gt[pos]
    targets[pos] = encode(boxes[pos], gt_boxes[best_gt[pos]], box_std)
    return AnchorTargets(labels, matched, targets)


def _clamp_eps(dtype) -> float:
    return max(1e-12, float(np.finfo(dtype).eps))


def focal_loss(logits: Tensor, targets: AnchorTargets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss over all non-ignored anchors and classes, / max(1, #positives)."""
    k = logits.shape[-1]
    labels = targets.labels.reshape(logits.shape[:-1])
    dtype = logits.dtype
    onehot = (labels[..., None] == np.arange(k)).astype(dtype)
    valid = (labels != IGNORE)[..., None].astype(dtype)
    eps = _clamp_eps(dtype)

    p = logits.sigmoid()
    p_t = (p * Tensor(2 * onehot - 1) + Tensor(1 - onehot)).clip(eps, 1 - eps)
    weight = Tensor((alpha * onehot + (1 - alpha) * (1 - onehot)) * valid)
    per_elem = -(weight * p_t.log())
    if gamma != 0:
        per_elem = per_elem * (1 - p_t) ** gamma
    return per_elem.sum() / max(1, targets.num_positive)


def smooth_l1(deltas: Tensor, targets: AnchorTargets, beta: float = 1 / 9) -> Tensor:
    """Smooth-L1 summed over the 4 coordinates of positive anchors, / #positives."""
    npos = targets.num_positive
    if npos == 0:
        return Tensor(np.zeros((), dtype=deltas.dtype))
    dtype = deltas.dtype
    mask = targets.positive.reshape(deltas.shape[:-1])[..., None].astype(dtype)
    goal = targets.box_targets.reshape(deltas.shape).astype(dtype) * mask
    diff = deltas * Tensor(mask) - Tensor(goal)
    mag = diff.abs()
    quad = mag.data < beta
    record_branch(quad)
    quad = quad.astype(dtype)
    per_elem = diff * diff * Tensor(quad * (0.5 / beta)) + (mag - 0.5 * beta) * Tensor(1 - quad)
    return per_elem.sum() / npos


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_tensor(x: Tensor, y: Tensor, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> Tensor:
    """Differentiable mean SSIM of grayscale conversions, Gaussian window, valid positions."""
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeError(f"image {x.shape[2]}×{x.shape[3]} smaller than the {window}×{window} SSIM window")
    dtype = x.dtype
    gray_w = Tensor(np.asarray(GRAY_WEIGHTS, dtype=dtype).reshape(1, 3, 1, 1))
    kernel = Tensor(_gaussian_window(window, sigma).astype(dtype).reshape(1, 1, window, window))
    gx = (x * gray_w).sum(axis=1, keepdims=True)
    gy = (y * gray_w).sum(axis=1, keepdims=True)
    mu_x, mu_y = conv2d(gx, kernel), conv2d(gy, kernel)
    var_x = conv2d(gx * gx, kernel) - mu_x * mu_x
    var_y = conv2d(gy * gy, kernel) - mu_y * mu_y
    cov = conv2d(gx * gy, kernel) - mu_x * mu_y
    c1, c2 = k1**2, k2**2
    num = (mu_x * mu_y * 2 + c1) * (cov * 2 + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def enhancement_loss(pred: Tensor, reference, mode: str = "l1", ssim_weight: float = 0.5) -> Tensor:
    """``l1``: mean |pred - ref|; ``l1+ssim`` adds ssim_weight·(1 - SSIM)."""
    ref = reference if isinstance(reference, Tensor) else Tensor(np.asarray(reference, dtype=pred.dtype))
    if ref.shape != pred.shape:
        raise ShapeError(f"enhancement loss shape mismatch: {pred.shape} vs {ref.shape}")
    loss = (pred - ref).abs().mean()
    if mode == "l1":
        return loss
    if mode == "l1+ssim":
        return loss + (1 - ssim_tensor(pred, ref)) * ssim_weight
    raise ValueError(f"unknown enhancement loss mode {mode!r}")


@dataclass
class Batch:
    """Degraded inputs, clean references (N×3×H×W in [0,1]) and per-image boxes."""

    degraded: np.ndarray
    reference: np.ndarray
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    ids: list[str] = field(default_factory=list)
    _targets: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.degraded)

    def targets(self, anchors: AnchorSet, cfg: LossConfig, box_std) -> AnchorTargets:
        key = (id(anchors), cfg.pos_iou, cfg.neg_iou, tuple(box_std))
        if key not in self._targets:
            self._targets[key] = AnchorTargets.stack(
                [match_anchors(anchors, b, c, cfg.pos_iou, cfg.neg_iou, box_std) for b, c in zip(self.boxes, self.classes)]
            )
        return self._targets[key]


@dataclass
class LossBreakdown:
    l_det_cls: Tensor
    l_det_box: Tensor
    l_enh: Tensor
    total: Tensor
    split_tag: str = "train"

    @property
    def l_det(self) -> Tensor:
        return self.l_det_cls + self.l_det_box

    def values(self) -> dict[str, float]:
        return {
            "l_det_cls": self.l_det_cls.item(),
            "l_det_box": self.l_det_box.item(),
            "l_enh": self.l_enh.item(),
            "total": self.total.item(),
        }


def task_losses(
    features: Tensor,
    batch: Batch,
    det: Mapping[str, Tensor] | None,
    enh: Mapping[str, Tensor] | None,
    bn: Mapping[str, BatchNormState],
    mcfg: ModelConfig,
    lcfg: LossConfig,
    anchors: AnchorSet | None = None,
    split_tag: str = "train",
    update_stats: bool = True,
) -> LossBreakdown:
    """Both task losses on given shared features; an absent subnet contributes zero."""
    zero = Tensor(np.zeros((), dtype=features.dtype))
    cls_loss = box_loss = enh_loss = zero
    if det is not None:
        h, w = features.shape[2], features.shape[3]
        anchors = anchors or generate_anchors(h, w, mcfg.anchor_sizes, mcfg.anchor_ratios)
        logits, deltas = flatten_levels(detect_forward(features, det, mcfg), len(mcfg.anchor_ratios), mcfg.num_classes)
        targets = batch.targets(anchors, lcfg, mcfg.box_std)
        cls_loss = focal_loss(logits, targets, lcfg.alpha, lcfg.gamma) * lcfg.det_weight
        box_loss = smooth_l1(deltas, targets, lcfg.smooth_l1_beta) * lcfg.det_weight
    if enh is not None:
        pred = enhance_forward(features, enh, bn, mcfg, training=True, update_stats=update_stats)
        enh_loss = enhancement_loss(pred, batch.reference, lcfg.enh_mode, lcfg.ssim_weight) * lcfg.enh_weight
    return LossBreakdown(cls_loss, box_loss, enh_loss, cls_loss + box_loss + enh_loss, split_tag)


def joint_loss(
    batch: Batch,
    params: DPNetParams,
    mcfg: ModelConfig,
    lcfg: LossConfig,
    anchors: AnchorSet | None = None,
    split_tag: str = "train",
    update_stats: bool = True,
) -> LossBreakdown:
    """Run the shared module once and sum the losses of every present subnet."""
    dtype = params.shared["shared.conv1.weight"].dtype
    features = shared_forward(Tensor(np.asarray(batch.degraded, dtype=dtype)), params.shared, mcfg)
    return task_losses(features, batch, params.det, params.enh, params.bn, mcfg, lcfg, anchors, split_tag, update_stats)
