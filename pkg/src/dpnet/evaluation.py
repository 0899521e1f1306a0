"""Model evaluation on a list of samples: eval-mode losses, mAP and image quality."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .config import Config
from .datasynth import CLASS_NAMES, Sample
from .losses import Batch, enhancement_loss, focal_loss, smooth_l1
from .metrics import MetricsReport, map_eval, psnr, ssim, uiqm
from .model import DPNet, decode_and_nms, detect_forward, enhance_forward, flatten_levels, shared_forward


def make_batch(samples: Sequence[Sample]) -> Batch:
    return Batch(
        np.stack([s.degraded for s in samples]),
        np.stack([s.reference for s in samples]),
        [s.boxes for s in samples],
        [s.classes for s in samples],
        [s.id for s in samples],
    )


@dataclass
class EvalResult:
    l_det_cls: float = math.nan
    l_det_box: float = math.nan
    l_enh: float = math.nan
    map: float = math.nan
    class_ap: dict[int, float] = field(default_factory=dict)
    psnr_in: list[float] = field(default_factory=list)
    psnr_out: list[float] = field(default_factory=list)
    ssim_out: list[float] = field(default_factory=list)
    detections: list = field(default_factory=list)
    enhanced: list[np.ndarray] = field(default_factory=list)

    @property
    def l_det(self) -> float:
        return self.l_det_cls + self.l_det_box

    @property
    def psnr_gain_fraction(self) -> float:
        """Share of images whose enhanced PSNR beats the degraded input's by at least 2 dB."""
        if not self.psnr_out:
            return math.nan
        return float(np.mean([o - i >= 2.0 for i, o in zip(self.psnr_in, self.psnr_out)]))


def evaluate(
    model: DPNet,
    samples: Sequence[Sample],
    cfg: Config,
    batch_size: int | None = None,
    keep_outputs: bool = False,
) -> EvalResult:
    """Eval-mode (running BN statistics) losses and metrics; subnets absent from ``model`` are skipped."""
    p, mc, lc = model.params, cfg.model, cfg.loss
    batch_size = batch_size or cfg.trainer.batch_size
    dtype = p.shared["shared.conv1.weight"].dtype
    res = EvalResult()
    sums = np.zeros(3)
    weights = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = make_batch(chunk)
        n, _, h, w = batch.degraded.shape
        with no_grad():
            feats = shared_forward(Tensor(batch.degraded.astype(dtype)), p.shared, mc)
            if p.det is not None:
                anchors = model.anchors(h, w)
                logits, deltas = flatten_levels(detect_forward(feats, p.det, mc), model.num_anchors, mc.num_classes)
                targets = batch.targets(anchors, lc, mc.box_std)
                sums[0] += focal_loss(logits, targets, lc.alpha, lc.gamma).item() * n
                sums[1] += smooth_l1(deltas, targets, lc.smooth_l1_beta).item() * n
                for i in range(n):
                    res.detections.append(
                        decode_and_nms(logits.data[i], deltas.data[i], anchors, h, w, mc.score_thresh,
                                       mc.nms_iou, mc.max_dets, mc.box_std, mc.pre_nms_topk)
                    )
            if p.enh is not None:
                pred = enhance_forward(feats, p.enh, p.bn, mc, training=False)
                sums[2] += enhancement_loss(pred, batch.reference, lc.enh_mode, lc.ssim_weight).item() * n
                for i in range(n):
                    out = pred.data[i].astype(np.float64)
                    res.psnr_in.append(psnr(batch.degraded[i], batch.reference[i]))
                    res.psnr_out.append(psnr(out, batch.reference[i]))
                    res.ssim_out.append(ssim(out, batch.reference[i], cfg.eval.ssim_window))
                    if keep_outputs:
                        res.enhanced.append(out)
        weights += n
    if p.det is not None:
        res.l_det_cls, res.l_det_box = sums[0] / weights, sums[1] / weights
        res.class_ap, res.map = map_eval(
            res.detections, [s.boxes for s in samples], [s.classes for s in samples], mc.num_classes, cfg.eval.iou_thresh
        )
    if p.enh is not None:
        res.l_enh = sums[2] / weights
    return res


def build_report(result: EvalResult, samples: Sequence[Sample], with_uiqm: bool = True) -> MetricsReport:
    report = MetricsReport()
    for i, s in enumerate(samples):
        row: dict[str, float] = {}
        if result.psnr_out:
            row["psnr_degraded"] = result.psnr_in[i]
            row["psnr_enhanced"] = result.psnr_out[i]
            row["ssim_enhanced"] = result.ssim_out[i]
            if with_uiqm and result.enhanced:
                row.update(uiqm(result.enhanced[i]))
        if row:
            report.images[s.id] = row
    for k, ap in result.class_ap.items():
        name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}"
        report.class_ap[name] = ap
    if not math.isnan(result.map):
        report.summary["map"] = result.map
        report.summary["l_det"] = result.l_det
    if result.psnr_out:
        report.summary["psnr_degraded"] = float(np.mean(result.psnr_in))
        report.summary["psnr_enhanced"] = float(np.mean(result.psnr_out))
        report.summary["ssim_enhanced"] = float(np.mean(result.ssim_out))
        report.summary["psnr_gain_fraction"] = result.psnr_gain_fraction
        report.summary["l_enh"] = result.l_enh
        if with_uiqm and result.enhanced:
            report.summary["uiqm_enhanced"] = float(np.mean([report.images[s.id]["uiqm"] for s in samples]))
    return report
