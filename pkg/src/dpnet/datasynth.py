"""Seeded synthetic underwater-style detection + enhancement datasets.

A clean scene of toy shapes on a textured background is degraded by a
wavelength-dependent colour cast, a haze (scattering) composition and
lighting artefacts, in that order. Everything is derived from
(master seed, split, index), so samples are independent of generation order.
"""
from __future__ import annotations

import csv
import io
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import Rng
from .boxes import iou
from .checkpoint import atomic_write
from .config import DataConfig
from .errors import ConfigError, DataError
from .imageio import dequantize, quantize, read_ppm, read_ppm_bytes, write_ppm

SPLITS = ("train", "val", "test")
CLASS_NAMES = ("circle", "square", "triangle")

# Red is absorbed fastest in both presets; they differ in green vs blue.
PRESETS = {
    "bluish": {"beta": (1.0, 0.4, 0.1), "airlight": (0.10, 0.42, 0.62)},
    "greenish": {"beta": (0.9, 0.12, 0.45), "airlight": (0.14, 0.55, 0.38)},
}

PLACEMENT_RETRIES = 100
SCENE_RESTARTS = 10
MIN_COVERAGE = 0.4


# --------------------------------------------------------------- operators
def apply_haze(img: np.ndarray, transmission, airlight) -> np.ndarray:
    """I = J·t + A·(1 - t) per pixel and channel."""
    t = np.asarray(transmission, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("transmission must lie in (0, 1]")
    a = np.asarray(airlight, dtype=np.float64).reshape(3, 1, 1)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("airlight must lie in [0, 1]")
    return img * t + a * (1 - t)


def apply_color_cast(img: np.ndarray, beta=PRESETS["bluish"]["beta"], depth: float = 1.0) -> np.ndarray:
    """Per-channel attenuation J_c·exp(-β_c·d)."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or depth < 0:
        raise ValueError("attenuation coefficients and depth must be non-negative")
    return img * np.exp(-beta * depth).reshape(3, 1, 1)


@dataclass(frozen=True)
class Highlight:
    cx: float
    cy: float
    radius: float
    intensity: float


def apply_lighting(img: np.ndarray, vignette: float = 0.0, highlight: Highlight | None = None) -> np.ndarray:
    """Radial falloff 1 - v·(r/r_max)² about the centre, plus an additive Gaussian blob; clamped."""
    if not 0 <= vignette < 1:
        raise ValueError("vignette strength must lie in [0, 1)")
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    out = img * (1 - vignette * r2 / r2.max()) if vignette else img.copy()
    if highlight is not None and highlight.intensity:
        if highlight.intensity < 0:
            raise ValueError("highlight intensity must be non-negative")
        d2 = (yy - highlight.cy) ** 2 + (xx - highlight.cx) ** 2
        out = out + highlight.intensity * np.exp(-d2 / (2 * highlight.radius**2))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DegradationParams:
    preset: str
    beta: tuple[float, float, float]
    depth: float
    transmission: float
    airlight: tuple[float, float, float]
    vignette: float
    highlight: Highlight | None = None


def degrade(reference: np.ndarray, p: DegradationParams) -> np.ndarray:
    img = apply_color_cast(reference, p.beta, p.depth)
    img = apply_haze(img, p.transmission, p.airlight)
    return apply_lighting(img, p.vignette, p.highlight)


def sample_degradation(rng: Rng, cfg: DataConfig, height: int, width: int) -> DegradationParams:
    preset = cfg.cast_preset if cfg.cast_preset != "mixed" else ("greenish", "bluish")[int(rng.integers(0, 2))]
    base = PRESETS[preset]
    depth = float(rng.uniform(*cfg.depth_range))
    t = float(rng.uniform(*cfg.transmission_range))
    jitter = rng.uniform(-cfg.airlight_jitter, cfg.airlight_jitter, 3)
    airlight = tuple(float(v) for v in np.clip(np.asarray(base["airlight"]) + jitter, 0.0, 1.0))
    vignette = float(rng.uniform(*cfg.vignette_range))
    highlight = None
    if rng.random() < cfg.highlight_prob:
        highlight = Highlight(
            cx=float(rng.uniform(0, width - 1)),
            cy=float(rng.uniform(0, height - 1)),
            radius=float(rng.uniform(*cfg.highlight_radius_range)) * width,
            intensity=float(rng.uniform(*cfg.highlight_intensity_range)),
        )
    return DegradationParams(preset, tuple(base["beta"]), depth, t, airlight, vignette, highlight)


# ------------------------------------------------------------------ scenes
@dataclass
class Scene:
    reference: np.ndarray
    classes: np.ndarray
    boxes: np.ndarray


def _background(rng: Rng, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, (3, 5, 5))
    smooth = ndimage.zoom(coarse, (1, h / 5, w / 5), order=1, mode="nearest", grid_mode=True)
    grain = rng.uniform(-0.03, 0.03, (3, h, w))
    return np.clip(smooth[:, :h, :w] + grain, 0.0, 1.0)


def _shape_mask(cls: int, x0: int, y0: int, s: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    if cls == 0:
        c = s / 2
        return (px - x0 - c) ** 2 + (py - y0 - c) ** 2 <= c * c
    if cls == 1:
        return (px >= x0) & (px <= x0 + s) & (py >= y0) & (py <= y0 + s)
    # Isosceles triangle, apex up, base on the bottom edge of the s×s square.
    frac = (py - y0) / s
    return (frac >= 0) & (frac <= 1) & (np.abs(px - x0 - s / 2) <= frac * s / 2)


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _contrasting_color(rng: Rng, under: np.ndarray) -> np.ndarray:
    color = rng.uniform(0.0, 1.0, 3)
    for _ in range(20):
        if np.abs(color - under).max() >= 0.35:
            break
        color = rng.uniform(0.0, 1.0, 3)
    else:
        color = np.where(under > 0.5, 0.05, 0.95)
    return color


def _place_objects(rng: Rng, img: np.ndarray, count: int, num_classes: int, cfg: DataConfig):
    _, h, w = img.shape
    scale = h / 96
    lo = max(1, int(round(cfg.min_object_size * scale)))
    hi = max(lo, int(round(cfg.max_object_size * scale)))
    owner = np.full((h, w), -1)
    classes: list[int] = []
    boxes: list[tuple[int, int, int, int]] = []
    areas: list[int] = []
    for k in range(count):
        for _ in range(PLACEMENT_RETRIES):
            cls = int(rng.integers(0, num_classes))
            s = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, w - s + 1))
            y0 = int(rng.integers(0, h - s + 1))
            mask = _shape_mask(cls, x0, y0, s, h, w)
            if not mask.any():
                continue
            box = _tight_box(mask)
            if min(box[2] - box[0], box[3] - box[1]) < lo:
                continue
            if any(iou(box, b) > cfg.max_overlap_iou for b in boxes):
                continue
            trial = owner.copy()
            trial[mask] = k
            ok = True
            for j, b in enumerate(boxes + [box]):
                visible = (trial[b[1] : b[3], b[0] : b[2]] == j).sum()
                if visible < MIN_COVERAGE * (b[2] - b[0]) * (b[3] - b[1]):
                    ok = False
                    break
            if not ok:
                continue
            owner = trial
            under = img[:, mask].mean(axis=1)
            img[:, mask] = _contrasting_color(rng, under)[:, None]
            classes.append(cls)
            boxes.append(box)
            areas.append(int(mask.sum()))
            break
        else:
            return None
    return classes, boxes


def gen_scene(rng: Rng, height: int, width: int, num_classes: int = 3, cfg: DataConfig | None = None) -> Scene:
    """Textured background with 1–6 non-overlapping (IoU ≤ 0.3) coloured shapes and tight boxes."""
    if height < 64 or width < 64 or height % 8 or width % 8:
        raise ValueError(f"scene extent {height}×{width} must be >= 64 and divisible by 8")
    cfg = cfg or DataConfig()
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    restarts = 0
    while True:
        img = _background(rng, height, width)
        placed = _place_objects(rng, img, count, num_classes, cfg)
        if placed is not None:
            break
        restarts += 1
        if restarts % SCENE_RESTARTS == 0 and count > 1:
            count -= 1
    classes, boxes = placed
    return Scene(img, np.asarray(classes, dtype=np.int64), np.asarray(boxes, dtype=np.int64).reshape(-1, 4))


# ---------------------------------------------------------------- datasets
MANIFEST_COLUMNS = (
    "split", "index", "preset", "beta_r", "beta_g", "beta_b", "depth", "transmission",
    "airlight_r", "airlight_g", "airlight_b", "vignette",
    "highlight_cx", "highlight_cy", "highlight_radius", "highlight_intensity",
)


def _manifest_row(split: str, index: int, p: DegradationParams) -> list[str]:
    hl = p.highlight
    hl_vals = ["", "", "", ""] if hl is None else [repr(hl.cx), repr(hl.cy), repr(hl.radius), repr(hl.intensity)]
    return [split, f"{index:05d}", p.preset, *(repr(b) for b in p.beta), repr(p.depth), repr(p.transmission),
            *(repr(a) for a in p.airlight), repr(p.vignette), *hl_vals]


def params_from_manifest(row: dict[str, str]) -> DegradationParams:
    hl = None
    if row["highlight_cx"]:
        hl = Highlight(float(row["highlight_cx"]), float(row["highlight_cy"]),
                       float(row["highlight_radius"]), float(row["highlight_intensity"]))
    return DegradationParams(
        row["preset"],
        (float(row["beta_r"]), float(row["beta_g"]), float(row["beta_b"])),
        float(row["depth"]),
        float(row["transmission"]),
        (float(row["airlight_r"]), float(row["airlight_g"]), float(row["airlight_b"])),
        float(row["vignette"]),
        hl,
    )


def split_counts(cfg: DataConfig) -> dict[str, int]:
    return {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}


def make_sample(cfg: DataConfig, split: str, index: int, num_classes: int = 3):
    """(quantized reference, quantized degraded, scene, params) for one sample; pure in its arguments."""
    rng = Rng((cfg.seed, SPLITS.index(split), index))
    size = cfg.image_size
    scene = gen_scene(rng.child(0), size, size, num_classes, cfg)
    params = sample_degradation(rng.child(1), cfg, size, size)
    ref_q = quantize(scene.reference)
    deg_q = quantize(degrade(dequantize(ref_q), params))
    return ref_q, deg_q, scene, params


def format_annotations(classes, boxes) -> str:
    return "".join(f"{int(c)} {int(b[0])} {int(b[1])} {int(b[2])} {int(b[3])}\n" for c, b in zip(classes, boxes))


def synth_dataset(cfg: DataConfig, root=None, overwrite: bool = False, num_classes: int = 3) -> dict[str, int]:
    """Write the dataset tree and manifest; returns the per-split sample counts."""
    root = Path(root if root is not None else cfg.root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DataError(f"output directory {root} is not empty (pass overwrite to replace it)")
        for split in SPLITS:
            shutil.rmtree(root / split, ignore_errors=True)
        (root / "manifest.tsv").unlink(missing_ok=True)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    counts = split_counts(cfg)
    for split in SPLITS:
        for i in range(counts[split]):
            ref_q, deg_q, scene, params = make_sample(cfg, split, i, num_classes)
            base = root / split
            write_ppm(base / "reference" / f"{i:05d}.ppm", ref_q)
            write_ppm(base / "degraded" / f"{i:05d}.ppm", deg_q)
            atomic_write(base / "annotations" / f"{i:05d}.txt", format_annotations(scene.classes, scene.boxes).encode())
            rows.append(_manifest_row(split, i, params))
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    writer.writerows(rows)
    atomic_write(root / "manifest.tsv", buf.getvalue().encode())
    return counts


def read_manifest(root) -> list[dict[str, str]]:
    path = Path(root) / "manifest.tsv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return list(csv.DictReader(io.StringIO(text), delimiter="\t"))


def reproduce_from_manifest(root) -> list[str]:
    """Re-degrade every stored reference from its manifest row; returns ids that differ."""
    root = Path(root)
    bad = []
    for row in read_manifest(root):
        split, idx = row["split"], row["index"]
        ref = read_ppm(root / split / "reference" / f"{idx}.ppm")
        stored = read_ppm_bytes(root / split / "degraded" / f"{idx}.ppm")
        if not np.array_equal(quantize(degrade(ref, params_from_manifest(row))), stored):
            bad.append(f"{split}/{idx}")
    return bad


# ------------------------------------------------------------------ loading
@dataclass
class Sample:
    id: str
    degraded: np.ndarray
    reference: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray


@dataclass
class Dataset:
    root: Path
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    @property
    def train(self) -> list[Sample]:
        return self.splits.get("train", [])

    @property
    def val(self) -> list[Sample]:
        return self.splits.get("val", [])

    @property
    def test(self) -> list[Sample]:
        return self.splits.get("test", [])


def parse_annotations(text: str, source: str, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    classes, boxes = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError
            c, x0, y0, x1, y1 = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{source}:{lineno}: expected 'class_id x_min y_min x_max y_max', got {line!r}") from None
        if x0 >= x1 or y0 >= y1 or c < 0 or (num_classes is not None and c >= num_classes):
            raise DataError(f"{source}:{lineno}: invalid object {line!r}")
        classes.append(c)
        boxes.append((x0, y0, x1, y1))
    return np.asarray(classes, dtype=np.int64), np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def load_split(root, split: str, num_classes: int | None = None) -> list[Sample]:
    base = Path(root) / split
    deg_dir = base / "degraded"
    if not deg_dir.is_dir():
        return []
    samples = []
    for path in sorted(deg_dir.glob("*.ppm")):
        stem = path.stem
        degraded = read_ppm(path)
        reference = read_ppm(base / "reference" / f"{stem}.ppm")
        if reference.shape != degraded.shape:
            raise DataError(f"{split}/{stem}: reference and degraded extents differ")
        ann = base / "annotations" / f"{stem}.txt"
        try:
            text = ann.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read annotations {ann}: {exc}") from exc
        classes, boxes = parse_annotations(text, str(ann), num_classes)
        samples.append(Sample(f"{split}/{stem}", degraded, reference, boxes, classes))
    return samples


def load_dataset(root, num_classes: int | None = None) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    ds = Dataset(root, {s: load_split(root, s, num_classes) for s in SPLITS})
    if not ds.train:
        raise DataError(f"dataset {root} has no training samples")
    return ds


def check_disjoint(splits: dict[str, list[Sample]]) -> None:
    """Reject datasets whose splits share an image (compared by degraded pixel content)."""
    seen: dict[bytes, str] = {}
    for name, samples in splits.items():
        for s in samples:
            key = quantize(s.degraded).tobytes()
            other = seen.get(key)
            if other is not None and not other.startswith(name + "/"):
                raise ConfigError(f"split overlap: {s.id} duplicates {other}")
            seen[key] = s.id
