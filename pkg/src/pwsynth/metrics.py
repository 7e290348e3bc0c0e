"""Foreground PSNR / SSIM and the optional external-metric hook."""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


def psnr(a, b, mask=None, data_range=1.0):
    """Peak SNR over the masked pixels of HxWxC images; identical inputs hit the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is None:
        mask = np.ones(a.shape[:2])
    m = np.asarray(mask, dtype=np.float64)[..., None]
    count = m.sum() * a.shape[-1]
    if count == 0:
        return PSNR_CAP
    mse = float((m * (a - b) ** 2).sum() / count)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim(a, b, mask=None, data_range=1.0):
    """Gaussian-window SSIM (11x11, sigma 1.5) averaged over the valid region
    and channels. With a mask, both images are masked first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)[..., None]
        a, b = a * m, b * m
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


class ExternalMetric:
    """Interface for embedding-based metrics (FID, LPIPS) supplied by a plugin."""

    name = "external"

    def __call__(self, G, examples):
        raise NotImplementedError
