"""Image quality metrics for renders in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable filter, keeping only fully covered ("valid") positions
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    h = len(w) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Windows are restricted to positions fully inside the image and the score
    is averaged over channels.  Images smaller than the window use a single
    window spanning the whole image.
    """
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(SSIM_WINDOW, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    w = gaussian_window(size)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, w), _filter(y, w)
        sxx = _filter(x * x, w) - mx * mx
        syy = _filter(y * y, w) - my * my
        sxy = _filter(x * y, w) - mx * my
        num = (2 * mx * my + C1) * (2 * sxy + C2)
        den = (mx * mx + my * my + C1) * (sxx + syy + C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
