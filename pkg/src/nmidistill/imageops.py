"""Small raster helpers shared by augmentation and probing."""

from __future__ import annotations

import numpy as np


def source_coords(out_size: int, in_size: int, align_corners: bool = False) -> np.ndarray:
    """Fractional source coordinates sampled by bilinear resizing along one axis."""
    if align_corners:
        if out_size == 1:
            return np.zeros(1)
        return np.arange(out_size) * (in_size - 1) / (out_size - 1)
    return np.clip((np.arange(out_size) + 0.5) * in_size / out_size - 0.5, 0, in_size - 1)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """Bilinear resize over axes (-3, -2) of a channels-last array [..., H, W, C]."""
    H, W = img.shape[-3], img.shape[-2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    ys = source_coords(out_h, H, align_corners)
    xs = source_coords(out_w, W, align_corners)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    rows0 = np.take(img, y0, axis=-3)
    rows1 = np.take(img, y1, axis=-3)
    top = np.take(rows0, x0, axis=-2) * (1 - fx) + np.take(rows0, x1, axis=-2) * fx
    bot = np.take(rows1, x0, axis=-2) * (1 - fx) + np.take(rows1, x1, axis=-2) * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype, copy=False)
