"""PSNR, SSIM and interpolation error on 8-bit grayscale images.

Images are 2-D ``uint8`` arrays. PSNR of identical images is ``inf``.
IE is the per-image root-mean-square difference on the 0-255 scale.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .numerics import Tensor4

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def as_gray8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() > 255:
            raise ValueError("grayscale image values must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_gray8(a), as_gray8(b)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def mse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / err)


def interpolation_error(a, b) -> float:
    return math.sqrt(mse(a, b))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _local_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable window, then keep only fully-covered ("valid") positions
    r = (len(g) - 1) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, L = 255)."""
    x, y = _pair(a, b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window_1d()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mx, my = _local_mean(x, g), _local_mean(y, g)
    sxx = _local_mean(x * x, g) - mx * mx
    syy = _local_mean(y * y, g) - my * my
    sxy = _local_mean(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def quantize(img: Tensor4 | np.ndarray) -> np.ndarray:
    """Map a ``[1, 1, h, w]`` image in [0, 1] to uint8, rounding half away from zero."""
    data = img.data if isinstance(img, Tensor4) else np.asarray(img, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1 or data.shape[1] != 1:
            raise ValueError(f"quantize needs a single-channel, batch-1 image, got {data.shape}")
        data = data[0, 0]
    elif data.ndim != 2:
        raise ValueError(f"quantize needs a 2-D plane or [1,1,h,w] tensor, got {data.shape}")
    v = np.clip(data, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)
