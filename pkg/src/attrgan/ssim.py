"""Single-scale structural similarity on background crops.

The background score crops the 10x10 top-left corner of both images and
runs SSIM with an 8x8 Gaussian window (sigma 1.5) over the valid positions;
a multi-scale variant cannot run on a 10x10 crop, so a single scale is used.
Inputs are (H,W,C) arrays in [-1,1] (data range 2).
"""

from __future__ import annotations

import numpy as np

BACKGROUND_CROP = 10
DEFAULT_WINDOW = 8
DEFAULT_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    # symmetric offsets; half-integer for even sizes
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed_sums(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means of a 2-D array."""
    k = kernel.shape[0]
    h, w = x.shape
    out = np.empty((h - k + 1, w - k + 1), dtype=np.float64)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = float((x[i : i + k, j : j + k] * kernel).sum())
    return out


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    data_range: float = 2.0,
    window_size: int = DEFAULT_WINDOW,
    sigma: float = DEFAULT_SIGMA,
) -> float:
    """Mean SSIM index over valid window positions and channels (in [-1, 1])."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[0], x.shape[1]) < window_size:
        raise ValueError(
            f"window {window_size} larger than image {x.shape[:2]}"
        )
    kernel = _gaussian_window(window_size, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    values = []
    for ch in range(x.shape[2]):
        a = x[..., ch].astype(np.float64)
        b = y[..., ch].astype(np.float64)
        mu_a = _windowed_sums(a, kernel)
        mu_b = _windowed_sums(b, kernel)
        var_a = _windowed_sums(a * a, kernel) - mu_a**2
        var_b = _windowed_sums(b * b, kernel) - mu_b**2
        cov = _windowed_sums(a * b, kernel) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(num / den)
    return float(np.mean(values))


def background_similarity(x: np.ndarray, y: np.ndarray, crop: int = BACKGROUND_CROP) -> float:
    """SSIM of the top-left `crop` x `crop` corners, clipped into [0, 1]."""
    if x.shape[0] < crop or x.shape[1] < crop:
        raise ValueError(f"images smaller than the {crop}x{crop} background crop")
    value = ssim(x[:crop, :crop], y[:crop, :crop])
    return float(np.clip(value, 0.0, 1.0))
