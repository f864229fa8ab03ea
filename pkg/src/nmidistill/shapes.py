"""Seeded synthetic corpus: coloured circles, squares and triangles on noisy backgrounds.

Used as the desk-scale distillation corpus and as a toy segmentation task
(class 0 is background).
"""

from __future__ import annotations

import numpy as np

SHAPE_CLASSES = ("background", "circle", "square", "triangle")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    rows = np.linspace(0, 3, H)
    cols = np.linspace(0, 3, W)
    r0 = np.clip(rows.astype(int), 0, 2)
    c0 = np.clip(cols.astype(int), 0, 2)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    smooth = ((1 - fr) * (1 - fc) * coarse[r0][:, c0] + (1 - fr) * fc * coarse[r0][:, c0 + 1]
              + fr * (1 - fc) * coarse[r0 + 1][:, c0] + fr * fc * coarse[r0 + 1][:, c0 + 1])
    return 0.5 * smooth + 0.5 * rng.uniform(0.0, 1.0, size=(H, W, 3))


def _shape_mask(kind: int, H: int, W: int, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
    if kind == 2:
        return (np.abs(yy - cy) <= size / 2) & (np.abs(xx - cx) <= size / 2)
    # upward triangle inscribed in the size x size box
    top, bottom = cy - size / 2, cy + size / 2
    frac = (yy - top) / max(size, 1e-9)
    half = frac * size / 2
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def make_shapes(n: int, image: tuple[int, int] = (32, 32), seed: int = 0,
                max_shapes: int = 3, size_range: tuple[float, float] = (8.0, 16.0)):
    """Return ``(images [n, H, W, 3] uint8, labels [n, H, W] uint8)``."""
    H, W = image
    rng = np.random.default_rng(seed)
    images = np.empty((n, H, W, 3), dtype=np.uint8)
    labels = np.zeros((n, H, W), dtype=np.uint8)
    for i in range(n):
        img = _background(rng, H, W)
        lab = np.zeros((H, W), dtype=np.uint8)
        for _ in range(rng.integers(1, max_shapes + 1)):
            kind = int(rng.integers(1, len(SHAPE_CLASSES)))
            size = rng.uniform(*size_range)
            cy = rng.uniform(size / 2, H - size / 2)
            cx = rng.uniform(size / 2, W - size / 2)
            mask = _shape_mask(kind, H, W, cy, cx, size)
            img[mask] = rng.uniform(0.0, 1.0, size=3)
            lab[mask] = kind
        images[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        labels[i] = lab
    return images, labels


def normalize_images(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 [.., H, W, C] -> standardised floats."""
    return ((images.astype(np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


def patch_labels(labels: np.ndarray, patch: int, num_classes: int = len(SHAPE_CLASSES)) -> np.ndarray:
    """Majority class per patch, [n, h*w]; ties go to the lower class id."""
    n, H, W = labels.shape
    h, w = H // patch, W // patch
    blocks = labels.reshape(n, h, patch, w, patch).transpose(0, 1, 3, 2, 4).reshape(n, h * w, patch * patch)
    counts = np.stack([(blocks == c).sum(-1) for c in range(num_classes)], axis=-1)
    return counts.argmax(-1)
