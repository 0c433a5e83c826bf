"""Structural similarity metric (Gaussian-windowed SSIM)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

from .tensor import ShapeError

__all__ = ["ssim", "ssim_video"]

_LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        if img.shape[-1] == 3:
            return (img @ _LUMA)[None]
        # Non-RGB channel counts (e.g. latent planes): score each channel.
        return np.moveaxis(img, -1, 0)
    raise ShapeError(f"expected (H, W) or (H, W, C) image, got {img.shape}")


def _default_range(a: np.ndarray) -> float:
    if a.dtype == np.uint8:
        return 255.0
    # Float images follow the [-1, 1] pixel convention used across the toolkit.
    return 2.0


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float | None = None,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM between two images of identical shape, in [-1, 1].

    Uses an 11x11 Gaussian window (sigma 1.5) with reflect-padded filtering;
    the window shrinks for images smaller than 11 pixels. Color images are
    converted with luma weights; other channel counts are averaged per
    channel.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = _default_range(a)
    ga = _to_gray(a).astype(np.float64)
    gb = _to_gray(b).astype(np.float64)
    h, w = ga.shape[1:]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ShapeError(f"image {a.shape} too small for SSIM")
    kern = _gaussian_kernel(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return convolve(x, kern, mode="reflect")

    scores = []
    for x, y in zip(ga, gb):
        mu_x = filt(x)
        mu_y = filt(y)
        var_x = filt(x * x) - mu_x**2
        var_y = filt(y * y) - mu_y**2
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def ssim_video(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Mean per-frame SSIM over (F, H, W[, C]) videos."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"video shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean([ssim(fa, fb, data_range) for fa, fb in zip(a, b)]))
