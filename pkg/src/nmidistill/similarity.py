"""Linear centered kernel alignment between feature matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from nmidistill.errors import NumericError


@dataclass(frozen=True)
class CkaResult:
    value: float
    n_examples: int
    dims: tuple[int, int]


def _as_features(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise NumericError(f"{name} must be a 2-D (examples x features) array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{name} contains non-finite values")
    return X


def linear_cka(X, Y) -> CkaResult:
    """CKA = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centred features."""
    X = _as_features(X, "X")
    Y = _as_features(Y, "Y")
    n = X.shape[0]
    if Y.shape[0] != n:
        raise NumericError(f"X and Y must share the example axis ({n} vs {Y.shape[0]})")
    if n < 3:
        raise NumericError(f"linear CKA needs at least 3 examples, got {n}")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    cross = np.linalg.norm(Yc.T @ Xc) ** 2
    norm_x = np.linalg.norm(Xc.T @ Xc)
    norm_y = np.linalg.norm(Yc.T @ Yc)
    if norm_x == 0 or norm_y == 0:
        raise NumericError("degenerate input: zero-variance features make CKA undefined")
    value = float(np.clip(cross / (norm_x * norm_y), 0.0, 1.0))
    return CkaResult(value, n, (X.shape[1], Y.shape[1]))


def cka_grid(feats_a: Sequence[np.ndarray], feats_b: Sequence[np.ndarray], pooled: bool = True) -> np.ndarray:
    """Layer-by-layer CKA between two models.

    ``feats_a`` / ``feats_b`` are per-image arrays of shape [layers, N, D]
    (one entry per image, same images in the same order). With ``pooled``
    the tokens of all images are stacked before CKA; otherwise CKA is
    computed per image and averaged.
    """
    feats_a = [np.asarray(f, dtype=np.float64) for f in feats_a]
    feats_b = [np.asarray(f, dtype=np.float64) for f in feats_b]
    if not feats_a or len(feats_a) != len(feats_b):
        raise NumericError("cka_grid needs the same non-zero number of images on both sides")
    la, lb = feats_a[0].shape[0], feats_b[0].shape[0]
    grid = np.zeros((la, lb))
    if pooled:
        A = np.concatenate(feats_a, axis=1)   # [La, sum N, Da]
        B = np.concatenate(feats_b, axis=1)
        for i in range(la):
            for j in range(lb):
                grid[i, j] = linear_cka(A[i], B[j]).value
    else:
        for fa, fb in zip(feats_a, feats_b):
            for i in range(la):
                for j in range(lb):
                    grid[i, j] += linear_cka(fa[i], fb[j]).value
        grid /= len(feats_a)
    return grid
