"""Binary PPM (P6, maxval 255) codec. Images are float 3×H×W arrays in [0,1] in memory."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .errors import DataError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def quantize(img: np.ndarray) -> np.ndarray:
    """3×H×W floats in [0,1] → H×W×3 uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a 3×H×W image, got shape {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 → 3×H×W float64 in [0,1]."""
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    pixels = img if img.dtype == np.uint8 and img.ndim == 3 and img.shape[2] == 3 else quantize(img)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    atomic_write(path, encode_ppm(img))


def decode_ppm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse P6 bytes into H×W×3 uint8."""
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{source}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise DataError(f"{source}: not a binary PPM (magic {fields[0][:8]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"{source}: malformed PPM header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{source}: unsupported PPM ({w}×{h}, maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{source}: PPM raster truncated ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm_bytes(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return decode_ppm(data, str(path))


def read_ppm(path) -> np.ndarray:
    return dequantize(read_ppm_bytes(path))
