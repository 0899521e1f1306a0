"""Flat ``key = value`` configuration with a single defaults table.

Each section is a frozen dataclass; the dataclass defaults *are* the defaults
table, and field metadata carries the help text and range check. Keys are
``<section>.<field>``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import ConfigError


def opt(default, doc: str, check: Callable[[Any], bool] | None = None, rule: str = ""):
    return field(default=default, metadata={"doc": doc, "check": check, "rule": rule})


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit_open(v) -> bool:
    return 0 < v < 1


def _all_pos(v) -> bool:
    return len(v) > 0 and all(x > 0 for x in v)


def _range_pair(lo: float, hi: float) -> Callable[[Any], bool]:
    return lambda v: len(v) == 2 and lo <= v[0] <= v[1] <= hi


@dataclass(frozen=True)
class ModelConfig:
    shared_channels: int = opt(32, "output channels of each shared-module convolution", _pos, "> 0")
    shared_kernels: tuple[int, ...] = opt((3, 5, 3), "kernel sizes of the three shared convolutions",
                                         lambda v: len(v) == 3 and all(k % 2 == 1 for k in v), "three odd sizes")
    enh_channels: int = opt(32, "hidden width of the enhancement subnet", _pos, "> 0")
    det_stem_channels: int = opt(32, "output width of the detection stem (stride 2)", _pos, "> 0")
    det_stage_channels: tuple[int, ...] = opt((32, 64, 128), "widths of the C2, C3, C4 backbone stages",
                                             lambda v: len(v) == 3 and all(c > 0 for c in v), "three positive ints")
    fpn_channels: int = opt(64, "pyramid feature width", _pos, "> 0")
    head_channels: int = opt(64, "width of the class and box head convolutions", _pos, "> 0")
    head_convs: int = opt(2, "hidden 3x3 convolutions per head", _nonneg, ">= 0")
    num_classes: int = opt(3, "number of object classes", _pos, "> 0")
    anchor_sizes: tuple[float, ...] = opt((16.0, 32.0, 64.0), "base anchor side per pyramid level P2, P3, P4",
                                         lambda v: len(v) == 3 and all(x > 0 for x in v), "three positive values")
    anchor_ratios: tuple[float, ...] = opt((0.5, 1.0, 2.0), "anchor width/height ratios", _all_pos, "positive")
    prior_prob: float = opt(0.01, "initial foreground probability of the class head", _unit_open, "in (0,1)")
    box_std: tuple[float, ...] = opt((0.1, 0.1, 0.2, 0.2), "normalizing std of (dx, dy, dw, dh)",
                                    lambda v: len(v) == 4 and all(x > 0 for x in v), "four positive values")
    score_thresh: float = opt(0.05, "minimum class score kept before NMS", lambda v: 0 <= v < 1, "in [0,1)")
    nms_iou: float = opt(0.5, "IoU above which NMS suppresses", _unit_open, "in (0,1)")
    max_dets: int = opt(100, "detections kept per image", _pos, "> 0")
    pre_nms_topk: int = opt(1000, "candidates kept per level before NMS", _pos, "> 0")
    bn_eps: float = opt(1e-5, "batchnorm epsilon", _pos, "> 0")
    bn_momentum: float = opt(0.1, "batchnorm running-stat momentum", _unit_open, "in (0,1)")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = opt(0.25, "focal loss class-balance weight", lambda v: 0 <= v <= 1, "in [0,1]")
    gamma: float = opt(2.0, "focal loss focusing exponent", _nonneg, ">= 0")
    smooth_l1_beta: float = opt(1.0 / 9.0, "smooth-L1 transition point", _pos, "> 0")
    pos_iou: float = opt(0.5, "anchor IoU at or above which an anchor is positive", _unit_open, "in (0,1)")
    neg_iou: float = opt(0.4, "anchor IoU below which an anchor is negative", _unit_open, "in (0,1)")
    enh_mode: str = opt("l1", "enhancement loss: l1 or l1+ssim", lambda v: v in ("l1", "l1+ssim"), "l1 | l1+ssim")
    ssim_weight: float = opt(0.5, "weight of (1 - SSIM) in l1+ssim mode", _nonneg, ">= 0")
    det_weight: float = opt(1.0, "weight of the detection loss in the joint sum", _nonneg, ">= 0")
    enh_weight: float = opt(1.0, "weight of the enhancement loss in the joint sum", _nonneg, ">= 0")


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = opt(0.002, "initial learning rate of the subnet (lower-level) Adam", _nonneg, ">= 0")
    lr_upper: float = opt(0.002, "initial learning rate of the shared-module (upper-level) Adam", _nonneg, ">= 0")
    lr_decay: float = opt(0.92, "per-epoch exponential learning-rate decay", lambda v: 0 < v <= 1, "in (0,1]")
    epochs: int = opt(30, "training epochs", _pos, "> 0")
    batch_size: int = opt(2, "images per batch", _pos, "> 0")
    seed: int = opt(0, "seed for initialization and batch order", _nonneg, ">= 0")
    upper_mode: str = opt("first_order", "shared-module hypergradient: first_order | unrolled_exact | unrolled_fd",
                          lambda v: v in ("first_order", "unrolled_exact", "unrolled_fd"), "one of the three modes")
    unroll_lr: float = opt(0.002, "step size of the modelled plain-gradient lower step", _nonneg, ">= 0")
    adam_beta1: float = opt(0.9, "Adam first-moment decay", lambda v: 0 <= v < 1, "in [0,1)")
    adam_beta2: float = opt(0.999, "Adam second-moment decay", lambda v: 0 <= v < 1, "in [0,1)")
    adam_eps: float = opt(1e-8, "Adam denominator epsilon", _pos, "> 0")
    dtype: str = opt("float32", "compute precision for training: float32 | float64",
                     lambda v: v in ("float32", "float64"), "float32 | float64")
    max_unrolled_params: int = opt(250_000, "largest model allowed for unrolled_exact", _pos, "> 0")
    val_fraction: float = opt(0.1, "train fraction held out when the dataset has no val split", _unit_open, "in (0,1)")
    tasks: str = opt("both", "trained tasks: both | det | enh", lambda v: v in ("both", "det", "enh"), "both | det | enh")
    freeze_shared: bool = opt(False, "keep the shared module at its initialization")


@dataclass(frozen=True)
class DataConfig:
    root: str = opt("data", "dataset tree root")
    image_size: int = opt(96, "image height and width", lambda v: v >= 64 and v % 8 == 0, ">= 64, divisible by 8")
    train_count: int = opt(200, "training samples", _pos, "> 0")
    val_count: int = opt(40, "validation samples", _nonneg, ">= 0")
    test_count: int = opt(40, "test samples", _pos, "> 0")
    seed: int = opt(0, "master seed of the synthetic dataset", _nonneg, ">= 0")
    min_objects: int = opt(1, "fewest objects per scene", _pos, "> 0")
    max_objects: int = opt(6, "most objects per scene", _pos, "> 0")
    min_object_size: int = opt(12, "smallest object box side in pixels at 96 px", _pos, "> 0")
    max_object_size: int = opt(36, "largest object box side in pixels at 96 px", _pos, "> 0")
    max_overlap_iou: float = opt(0.3, "largest IoU allowed between two object boxes", lambda v: 0 <= v < 1, "in [0,1)")
    cast_preset: str = opt("mixed", "colour cast: greenish | bluish | mixed",
                           lambda v: v in ("greenish", "bluish", "mixed"), "greenish | bluish | mixed")
    depth_range: tuple[float, ...] = opt((0.1, 0.6), "range of the attenuation depth d", _range_pair(0, 10), "0 <= lo <= hi <= 10")
    transmission_range: tuple[float, ...] = opt((0.7, 0.95), "range of the scalar transmission t",
                                               lambda v: len(v) == 2 and 0 < v[0] <= v[1] <= 1, "0 < lo <= hi <= 1")
    airlight_jitter: float = opt(0.08, "uniform jitter applied to the preset airlight colour", lambda v: 0 <= v < 0.5, "in [0,0.5)")
    vignette_range: tuple[float, ...] = opt((0.0, 0.35), "range of the vignette strength",
                                           lambda v: len(v) == 2 and 0 <= v[0] <= v[1] < 1, "0 <= lo <= hi < 1")
    highlight_prob: float = opt(0.5, "probability that a scene gets a highlight blob", lambda v: 0 <= v <= 1, "in [0,1]")
    highlight_intensity_range: tuple[float, ...] = opt((0.1, 0.3), "range of the highlight peak intensity",
                                                      _range_pair(0, 1), "0 <= lo <= hi <= 1")
    highlight_radius_range: tuple[float, ...] = opt((0.1, 0.25), "range of the highlight radius as a fraction of width",
                                                   _range_pair(0.01, 1), "0.01 <= lo <= hi <= 1")


@dataclass(frozen=True)
class EvalConfig:
    ssim_window: str = opt("gaussian", "SSIM window: gaussian (11x11, sigma 1.5) | block (8x8)",
                           lambda v: v in ("gaussian", "block"), "gaussian | block")
    iou_thresh: float = opt(0.5, "IoU threshold of a true positive", _unit_open, "in (0,1)")


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "loss": LossConfig,
    "trainer": TrainerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def canonical_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.flat().items()))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def replace(self, **overrides: Any) -> "Config":
        """Return a copy with dotted keys overridden, e.g. ``replace(**{"trainer.epochs": 3})``."""
        return parse_config(None, [f"{k}={format_value(v)}" for k, v in overrides.items()], base=self)


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_map() -> dict[str, tuple[type, dataclasses.Field, Any]]:
    out = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out[f"{section}.{f.name}"] = (cls, f, hints[f.name])
    return out


def _convert(raw: str, typ, key: str, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            (inner, *_rest) = typing.get_args(typ)
            return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} for key {key!r}") from None
    raise ConfigError(f"{where}: unsupported type for key {key!r}")


def defaults_table() -> list[tuple[str, str, str]]:
    """(key, default, help) for every key, in section order."""
    rows = []
    for key, (_cls, f, _typ) in _field_map().items():
        rows.append((key, format_value(f.default), f.metadata.get("doc", "")))
    return rows


def parse_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    base: Config | None = None,
) -> Config:
    """Overlay defaults (or ``base``) with a config file and then ``key=value`` overrides."""
    fields = _field_map()
    values: dict[str, Any] = (base or Config()).flat()
    entries: list[tuple[str, str, str]] = []
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: malformed line (expected key = value)")
            k, v = stripped.split("=", 1)
            entries.append((k.strip(), v, f"{path}:{lineno}"))
    for i, item in enumerate(overrides, 1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: malformed override {item!r} (expected key=value)")
        k, v = item.split("=", 1)
        entries.append((k.strip(), v, f"--set #{i}"))

    for key, raw, where in entries:
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        _cls, f, typ = fields[key]
        value = _convert(raw, typ, key, where)
        check = f.metadata.get("check")
        if check is not None and not check(value):
            raise ConfigError(f"{where}: value {raw.strip()!r} out of range for {key!r} (expected {f.metadata['rule']})")
        values[key] = value

    sections: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in values.items():
        s, name = key.split(".", 1)
        sections[s][name] = value
    cfg = Config(**{s: SECTIONS[s](**kw) for s, kw in sections.items()})
    if cfg.loss.neg_iou > cfg.loss.pos_iou:
        raise ConfigError("loss.neg_iou must not exceed loss.pos_iou")
    if cfg.data.min_objects > cfg.data.max_objects:
        raise ConfigError("data.min_objects must not exceed data.max_objects")
    return cfg
