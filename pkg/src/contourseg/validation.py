"""Input validation for the array-facing estimator API."""

from __future__ import annotations

import numpy as np


def check_image_batch(X) -> np.ndarray:
    """Validate a float image batch of shape (N, 3, H, W) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("need at least one image")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got [{X.min()}, {X.max()}]")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_mask_batch(y, image_shape) -> np.ndarray:
    """Validate binary masks of shape (N, H, W) matching an image batch."""
    y = np.asarray(y)
    expected = (image_shape[0],) + tuple(image_shape[2:])
    if y.shape != expected:
        raise ValueError(f"expected masks of shape {expected}, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return y.astype(np.uint8)
