"""Attention heatmaps as binary PPM (P6) images."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from gla.kernels import partition_bounds

# dark at 0.0, violet at 0.5, light at 1.0
RAMP_ANCHORS = ((0.0, (16, 16, 64)), (0.5, (128, 0, 160)), (1.0, (255, 240, 200)))


def color_ramp() -> np.ndarray:
    """256 x 3 uint8 lookup table, piecewise linear through the anchors."""
    t = np.arange(256) / 255.0
    pos = [a[0] for a in RAMP_ANCHORS]
    out = np.empty((256, 3), dtype=np.uint8)
    for ch in range(3):
        vals = np.interp(t, pos, [a[1][ch] for a in RAMP_ANCHORS])
        out[:, ch] = np.floor(vals + 0.5).astype(np.uint8)
    return out


RAMP = color_ramp()


def ramp_index(values: np.ndarray) -> np.ndarray:
    """Map weights in [0, 1] to ramp entries, rounding halves up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.int64)


def render_heatmap(weights: np.ndarray, scale: int = 1, out_size: Optional[tuple] = None) -> np.ndarray:
    """Channel-mean weight map as an (H, W, 3) uint8 image.

    ``weights`` is (C, R, S) or (C, H, W). With ``out_size`` the map is
    expanded to that many pixels using adaptive partition boundaries;
    otherwise every cell becomes a ``scale x scale`` block.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3:
        raise ValueError(f"heatmap weights must be (C, R, S), got shape {w.shape}")
    m = w.mean(axis=0)
    if np.any(m < 0) or np.any(m > 1):
        warnings.warn("attention weights outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        m = np.clip(m, 0.0, 1.0)
    idx = ramp_index(m)
    if out_size is not None:
        h, wd = out_size
        rb = partition_bounds(h, idx.shape[0])
        cb = partition_bounds(wd, idx.shape[1])
        idx = np.repeat(np.repeat(idx, np.diff(rb), axis=0), np.diff(cb), axis=1)
    elif scale > 1:
        idx = np.repeat(np.repeat(idx, scale, axis=0), scale, axis=1)
    return RAMP[idx]


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export_attention_heatmap(weights, path, scale: int = 1, out_size: Optional[tuple] = None) -> Path:
    path = Path(path)
    path.write_bytes(ppm_bytes(render_heatmap(weights, scale=scale, out_size=out_size)))
    return path
