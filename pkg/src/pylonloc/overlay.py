"""Heatmap overlays: grayscale input, alpha-blended CAM and ground-truth box outlines."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import BBox

# viridis sampled at nine evenly spaced points; the 256-entry table is
# interpolated from these so overlays do not depend on any plotting library
_VIRIDIS_ANCHORS = np.array([
    (68, 1, 84), (71, 44, 122), (59, 81, 139), (44, 113, 142), (33, 144, 141),
    (39, 173, 129), (92, 200, 99), (170, 220, 50), (253, 231, 37),
], dtype=np.float64)


def colormap_lut() -> np.ndarray:
    """(256, 3) uint8 lookup table."""
    t = np.linspace(0.0, 1.0, len(_VIRIDIS_ANCHORS))
    grid = np.arange(256) / 255.0
    lut = np.stack([np.interp(grid, t, _VIRIDIS_ANCHORS[:, k]) for k in range(3)], axis=1)
    return np.round(lut).astype(np.uint8)


LUT = colormap_lut()
BOX_COLOR = np.array([255, 64, 64], dtype=np.uint8)


def render_overlay(image: np.ndarray, cam: np.ndarray, boxes: Sequence[BBox] = (), alpha: float = 0.5) -> np.ndarray:
    """(H, W, 3) uint8: ``image`` in [0, 1] blended with the min-max normalized ``cam``."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    norm = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    colors = LUT[np.clip(np.floor(norm * 255.0 + 0.5), 0, 255).astype(np.int64)].astype(np.float64)
    gray = np.repeat(image[..., None] * 255.0, 3, axis=2)
    out = np.round((1.0 - alpha) * gray + alpha * colors).astype(np.uint8)
    h, w = image.shape
    for b in boxes:
        x0, y0 = int(np.clip(np.floor(b.x), 0, w - 1)), int(np.clip(np.floor(b.y), 0, h - 1))
        x1 = int(np.clip(np.ceil(b.x + b.w) - 1, 0, w - 1))
        y1 = int(np.clip(np.ceil(b.y + b.h) - 1, 0, h - 1))
        out[y0, x0 : x1 + 1] = BOX_COLOR
        out[y1, x0 : x1 + 1] = BOX_COLOR
        out[y0 : y1 + 1, x0] = BOX_COLOR
        out[y0 : y1 + 1, x1] = BOX_COLOR
    return out


def save_overlay(path, rgb: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)
