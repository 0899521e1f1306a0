"""DPNet: shared module, enhancement subnet and a reduced RetinaNet-style detector.

Parameters live in three named partitions: ``shared`` (u), ``det`` and ``enh``
(together ω). Every forward function takes the partition mapping explicitly so
the trainer can substitute non-leaf tensors (e.g. a virtually updated ω).
"""
from __future__ import annotations

import math
from collections.abc import Iterator, MutableMapping
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import BatchNormState, Rng, Tensor, batchnorm2d, concat, conv2d, crop_to, no_grad, tensor_create, upsample_nearest
from .boxes import AnchorSet, clip_boxes, decode, generate_anchors, nms
from .config import ModelConfig
from .errors import ConfigError, ShapeError

PARTITIONS = ("shared", "det", "enh")


class Partition(MutableMapping):
    """Name → Tensor mapping that records which entries were read."""

    def __init__(self, name: str, items: Mapping[str, Tensor] | None = None):
        self.name = name
        self._items: dict[str, Tensor] = dict(items or {})
        self.accessed: set[str] = set()

    def __getitem__(self, key: str) -> Tensor:
        self.accessed.add(key)
        return self._items[key]

    def __setitem__(self, key: str, value: Tensor) -> None:
        self._items[key] = value

    def __delitem__(self, key: str) -> None:
        del self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def tensors(self) -> dict[str, Tensor]:
        """Entries without marking them as accessed."""
        return dict(self._items)


@dataclass
class DPNetParams:
    shared: Partition
    det: Partition | None
    enh: Partition | None
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def partitions(self) -> dict[str, Partition]:
        return {n: p for n, p in (("shared", self.shared), ("det", self.det), ("enh", self.enh)) if p is not None}

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in self.partitions().values():
            out.update(part.tensors())
        return out

    def omega(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.det, self.enh):
            if part is not None:
                out.update(part.tensors())
        return out

    def reset_access(self) -> None:
        for part in self.partitions().values():
            part.accessed.clear()

    def count(self, partition: str | None = None) -> int:
        if partition is None:
            return sum(t.size for t in self.named().values())
        part = self.partitions().get(partition)
        return 0 if part is None else sum(t.size for t in part.tensors().values())


# ------------------------------------------------------------------ build
def _conv(params, rng: Rng, name: str, cin: int, cout: int, k: int, dtype, bias: bool = True) -> None:
    params[f"{name}.weight"] = tensor_create(
        (cout, cin, k, k), "kaiming", fan_in=cin * k * k, rng=rng, dtype=dtype, name=f"{name}.weight"
    )
    if bias:
        params[f"{name}.bias"] = tensor_create((cout,), "zeros", dtype=dtype, name=f"{name}.bias")


def build_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64, tasks: str = "both") -> DPNetParams:
    """Initialize all partitions; each draws from its own child stream of ``seed``."""
    root = Rng(seed)
    shared = Partition("shared")
    rng = root.child(0)
    c = cfg.shared_channels
    cin = 3
    for i, k in enumerate(cfg.shared_kernels, 1):
        _conv(shared, rng, f"shared.conv{i}", cin, c, k, dtype)
        cin = c

    enh = Partition("enh")
    bn: dict[str, BatchNormState] = {}
    rng = root.child(1)
    widths = [c, cfg.enh_channels, cfg.enh_channels, 3]
    for i in range(3):
        _conv(enh, rng, f"enh.conv{i + 1}", widths[i], widths[i + 1], 3, dtype, bias=False)
        enh[f"enh.bn{i + 1}.gamma"] = tensor_create((widths[i + 1],), "constant", value=1.0, dtype=dtype, name=f"enh.bn{i + 1}.gamma")
        enh[f"enh.bn{i + 1}.beta"] = tensor_create((widths[i + 1],), "zeros", dtype=dtype, name=f"enh.bn{i + 1}.beta")
        bn[f"enh.bn{i + 1}"] = BatchNormState.fresh(widths[i + 1], cfg.bn_momentum, dtype)

    det = Partition("det")
    rng = root.child(2)
    _conv(det, rng, "det.stem", c, cfg.det_stem_channels, 3, dtype)
    cin = cfg.det_stem_channels
    for s, width in enumerate(cfg.det_stage_channels, 1):
        _conv(det, rng, f"det.stage{s}.conv1", cin, width, 3, dtype)
        _conv(det, rng, f"det.stage{s}.conv2", width, width, 3, dtype)
        cin = width
    f = cfg.fpn_channels
    for lvl, width in zip((2, 3, 4), cfg.det_stage_channels):
        _conv(det, rng, f"det.fpn.lateral{lvl}", width, f, 1, dtype)
        _conv(det, rng, f"det.fpn.output{lvl}", f, f, 3, dtype)
    a = len(cfg.anchor_ratios)
    for head, out_ch in (("cls", a * cfg.num_classes), ("box", a * 4)):
        cin = f
        for j in range(cfg.head_convs):
            _conv(det, rng, f"det.{head}.conv{j + 1}", cin, cfg.head_channels, 3, dtype)
            cin = cfg.head_channels
        det[f"det.{head}.out.weight"] = tensor_create(
            (out_ch, cin, 3, 3), "uniform", low=-0.01, high=0.01, rng=rng, dtype=dtype, name=f"det.{head}.out.weight"
        )
        bias = -math.log((1 - cfg.prior_prob) / cfg.prior_prob) if head == "cls" else 0.0
        det[f"det.{head}.out.bias"] = tensor_create((out_ch,), "constant", value=bias, dtype=dtype, name=f"det.{head}.out.bias")

    params = DPNetParams(shared, det, enh, bn)
    if tasks == "det":
        params.enh, params.bn = None, {}
    elif tasks == "enh":
        params.det = None
    for t in params.named().values():
        t.requires_grad = True
    return params


# ---------------------------------------------------------------- forward
def shared_forward(image: Tensor, shared: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Φ(u): three convolutions at full resolution, ReLU after the first two."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"shared module expects N×3×H×W input, got {image.shape}")
    x = image
    n = len(cfg.shared_kernels)
    for i, k in enumerate(cfg.shared_kernels, 1):
        x = conv2d(x, shared[f"shared.conv{i}.weight"], shared[f"shared.conv{i}.bias"], 1, k // 2)
        if i < n:
            x = x.relu()
    return x


def enhance_forward(
    features: Tensor,
    enh: Mapping[str, Tensor],
    bn: Mapping[str, BatchNormState],
    cfg: ModelConfig,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    x = features
    for i in range(1, 4):
        x = conv2d(x, enh[f"enh.conv{i}.weight"], None, 1, 1)
        x = batchnorm2d(
            x,
            enh[f"enh.bn{i}.gamma"],
            enh[f"enh.bn{i}.beta"],
            bn.get(f"enh.bn{i}"),
            training=training,
            eps=cfg.bn_eps,
            update_stats=update_stats,
        )
        x = x.relu() if i < 3 else x.sigmoid()
    return x


def _c(x: Tensor, p: Mapping[str, Tensor], name: str, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    return conv2d(x, w, p[f"{name}.bias"], stride, w.shape[2] // 2)


def detect_forward(features: Tensor, det: Mapping[str, Tensor], cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    """Per-level (class logits N×(A·K)×h×w, box deltas N×(A·4)×h×w) for P2, P3, P4."""
    h, w = features.shape[2], features.shape[3]
    if h % 8 or w % 8:
        raise ShapeError(f"detection input extent {h}×{w} must be divisible by 8")
    x = _c(features, det, "det.stem", 2).relu()
    stages = []
    for s in (1, 2, 3):
        x = _c(x, det, f"det.stage{s}.conv1", 2).relu()
        x = _c(x, det, f"det.stage{s}.conv2").relu()
        stages.append(x)
    laterals = [_c(c, det, f"det.fpn.lateral{lvl}") for c, lvl in zip(stages, (2, 3, 4))]
    top = laterals[2]
    merged = [top]
    for lat in (laterals[1], laterals[0]):
        top = lat + crop_to(upsample_nearest(top, 2), lat.shape[2], lat.shape[3])
        merged.insert(0, top)
    outputs = []
    for p, lvl in zip(merged, (2, 3, 4)):
        p = _c(p, det, f"det.fpn.output{lvl}")
        heads = []
        for head in ("cls", "box"):
            y = p
            for j in range(cfg.head_convs):
                y = _c(y, det, f"det.{head}.conv{j + 1}").relu()
            heads.append(_c(y, det, f"det.{head}.out"))
        outputs.append((heads[0], heads[1]))
    return outputs


def flatten_levels(levels: list[tuple[Tensor, Tensor]], num_anchors: int, num_classes: int) -> tuple[Tensor, Tensor]:
    """Concatenate per-level head maps into N×M×K logits and N×M×4 deltas, anchor order (level, row, col, ratio)."""
    logits, deltas = [], []
    for cls, box in levels:
        n, _, gh, gw = cls.shape
        logits.append(
            cls.reshape(n, num_anchors, num_classes, gh, gw).transpose(0, 3, 4, 1, 2).reshape(n, gh * gw * num_anchors, num_classes)
        )
        deltas.append(box.reshape(n, num_anchors, 4, gh, gw).transpose(0, 3, 4, 1, 2).reshape(n, gh * gw * num_anchors, 4))
    return concat(logits, axis=1), concat(deltas, axis=1)


# -------------------------------------------------------------- inference
@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode_and_nms(
    logits: np.ndarray,
    deltas: np.ndarray,
    anchors: AnchorSet,
    height: int,
    width: int,
    score_thresh: float = 0.05,
    iou_thresh: float = 0.5,
    max_dets: int = 100,
    box_std=(0.1, 0.1, 0.2, 0.2),
    pre_nms_topk: int = 1000,
) -> list[Detection]:
    """Single-image post-processing: threshold, per-level top-k, decode, clip, per-class NMS."""
    scores = _sigmoid_np(np.asarray(logits, dtype=np.float64))
    deltas = np.asarray(deltas, dtype=np.float64)
    all_boxes = anchors.boxes
    cand_anchor, cand_class, cand_score = [], [], []
    start = 0
    for count in anchors.counts:
        s = scores[start : start + count]
        a_idx, k_idx = np.nonzero(s > score_thresh)
        sc = s[a_idx, k_idx]
        if len(sc) > pre_nms_topk:
            top = np.argsort(-sc, kind="stable")[:pre_nms_topk]
            a_idx, k_idx, sc = a_idx[top], k_idx[top], sc[top]
        cand_anchor.append(a_idx + start)
        cand_class.append(k_idx)
        cand_score.append(sc)
        start += count
    a_idx = np.concatenate(cand_anchor)
    k_idx = np.concatenate(cand_class)
    sc = np.concatenate(cand_score)
    if len(sc) == 0:
        return []
    boxes = clip_boxes(decode(all_boxes[a_idx], deltas[a_idx], box_std), height, width)
    kept = []
    for k in np.unique(k_idx):
        sel = np.nonzero(k_idx == k)[0]
        keep = nms(boxes[sel], sc[sel], iou_thresh)
        kept.extend(sel[keep].tolist())
    kept = np.asarray(kept, dtype=np.int64)
    order = kept[np.argsort(-sc[kept], kind="stable")][:max_dets]
    return [Detection(tuple(float(v) for v in boxes[i]), int(k_idx[i]), float(sc[i])) for i in order]


@dataclass
class InferenceResult:
    detections: list[list[Detection]] | None = None
    enhanced: np.ndarray | None = None
    raw_logits: np.ndarray | None = None
    raw_deltas: np.ndarray | None = None


class DPNet:
    """Architecture config plus parameters, with anchor caching."""

    def __init__(self, cfg: ModelConfig, params: DPNetParams):
        self.cfg = cfg
        self.params = params
        self._anchor_cache: dict[tuple[int, int], AnchorSet] = {}

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64, tasks: str = "both") -> "DPNet":
        return cls(cfg, build_params(cfg, seed, dtype, tasks))

    @property
    def num_anchors(self) -> int:
        return len(self.cfg.anchor_ratios)

    def anchors(self, height: int, width: int) -> AnchorSet:
        key = (height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(height, width, self.cfg.anchor_sizes, self.cfg.anchor_ratios)
        return self._anchor_cache[key]

    def infer(self, images: np.ndarray, mode: str = "both") -> InferenceResult:
        """Eval-mode inference keeping only the branches ``mode`` needs."""
        if mode not in ("detect", "enhance", "both"):
            raise ConfigError(f"unknown inference mode {mode!r}")
        p = self.params
        if mode in ("detect", "both") and p.det is None:
            raise ConfigError("detection requested but detection-subnet parameters are missing")
        if mode in ("enhance", "both") and p.enh is None:
            raise ConfigError("enhancement requested but enhancement-subnet parameters are missing")
        dtype = p.shared["shared.conv1.weight"].dtype
        x = Tensor(np.asarray(images, dtype=dtype))
        n, _, h, w = x.shape
        result = InferenceResult()
        with no_grad():
            feats = shared_forward(x, p.shared, self.cfg)
            if mode in ("detect", "both"):
                levels = detect_forward(feats, p.det, self.cfg)
                logits, deltas = flatten_levels(levels, self.num_anchors, self.cfg.num_classes)
                result.raw_logits, result.raw_deltas = logits.data, deltas.data
                anchors = self.anchors(h, w)
                c = self.cfg
                result.detections = [
                    decode_and_nms(
                        logits.data[i], deltas.data[i], anchors, h, w,
                        c.score_thresh, c.nms_iou, c.max_dets, c.box_std, c.pre_nms_topk,
                    )
                    for i in range(n)
                ]
            if mode in ("enhance", "both"):
                result.enhanced = enhance_forward(feats, p.enh, p.bn, self.cfg, training=False).data
        return result


def infer(images: np.ndarray, model: DPNet, mode: str = "both") -> InferenceResult:
    return model.infer(images, mode)
