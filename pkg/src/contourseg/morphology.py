"""Binary morphology and Gaussian smoothing for boundary weight maps.

All functions are pure and operate on 2-d numpy arrays. Masks are
strictly {0, 1} valued. Border rules are complementary: dilation treats
out-of-image pixels as 0, erosion treats them as 1, so an object touching
the frame does not produce a phantom boundary band along the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class WeightMapConfig:
    """Parameters of the boundary weight map.

    k scales the morphological gradient band, se_size is the square
    structuring element width, gauss_size/gauss_sigma shape the smoothing
    kernel. All window sizes must be odd.
    """

    k: float = 5.0
    se_size: int = 5
    gauss_size: int = 5
    gauss_sigma: float = 1.0

    def __post_init__(self):
        _check_window(self.se_size, "se_size")
        _check_window(self.gauss_size, "gauss_size")
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.gauss_sigma <= 0:
            raise ValueError(f"gauss_sigma must be positive, got {self.gauss_sigma}")


def _check_window(size: int, name: str) -> None:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"{name} must be odd and >= 1, got {size}")


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8, copy=False)

def dilate(mask: np.ndarray, se_size: int = 5) -> np.ndarray:
    """Set each pixel to 1 iff any pixel under the se_size window is 1."""
    mask = _check_mask(mask)
    _check_window(se_size, "se_size")
    r = se_size // 2
    padded = np.pad(mask, r, constant_values=0)
    win = sliding_window_view(padded, (se_size, se_size))
    return win.max(axis=(2, 3))


def erode(mask: np.ndarray, se_size: int = 5) -> np.ndarray:
    """Set each pixel to 1 iff every pixel under the se_size window is 1."""
    mask = _check_mask(mask)
    _check_window(se_size, "se_size")
    r = se_size // 2
    padded = np.pad(mask, r, constant_values=1)
    win = sliding_window_view(padded, (se_size, se_size))
    return win.min(axis=(2, 3))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-d Gaussian, entries proportional to exp(-(dx^2+dy^2)/2sigma^2)."""
    _check_window(size, "size")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(x: np.ndarray, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Convolve a real-valued map with a normalized Gaussian, zero-padded borders."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {x.shape}")
    kernel = gaussian_kernel(size, sigma)
    r = size // 2
    padded = np.pad(x, r)
    win = sliding_window_view(padded, (size, size))
    return np.einsum("ijkl,kl->ij", win, kernel, optimize=True)


def morphological_gradient(mask: np.ndarray, se_size: int = 5) -> np.ndarray:
    """Dilation minus erosion: a {0,1} band around mask transitions."""
    return dilate(mask, se_size) - erode(mask, se_size)


def contour_weight_map(mask: np.ndarray, cfg: WeightMapConfig | None = None) -> np.ndarray:
    """Per-pixel loss weights emphasizing a smoothed band around mask boundaries.

    Computed as gaussian_blur(k * (dilate(mask) - erode(mask))) + 1, so
    values lie in [1, k + 1] and equal exactly 1 away from boundaries.
    """
    if cfg is None:
        cfg = WeightMapConfig()
    band = morphological_gradient(mask, cfg.se_size).astype(np.float64)
    return gaussian_blur(cfg.k * band, cfg.gauss_size, cfg.gauss_sigma) + 1.0
