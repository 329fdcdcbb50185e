"""Image quality metrics: MSE, PSNR, MS-SSIM and its decibel form.

Images are float arrays shaped ``[C, H, W]`` (or ``[H, W]``) on ``[0, peak]``.
MS-SSIM is computed per channel and averaged.  Images smaller than the full
five-scale pyramid needs (176 px on the short side) use as many scales as fit
an 11-tap window, with the leading weights renormalized to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DB_CAP = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5


@dataclass
class QualityReport:
    mse: float
    psnr_db: float
    msssim: float
    msssim_db: float
    bpp: float | None = None

    @classmethod
    def compare(cls, x, x_hat, bpp: float | None = None, peak: float = 1.0) -> "QualityReport":
        v = ms_ssim(x, x_hat, peak)
        return cls(mse(x, x_hat), psnr(x, x_hat, peak), v, msssim_db(v), bpp)


def _pair(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def mse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, peak: float = 1.0) -> float:
    err = mse(x, x_hat)
    if err == 0.0:
        return DB_CAP
    return min(DB_CAP, float(10.0 * np.log10(peak * peak / err)))


def msssim_db(v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"MS-SSIM value must lie in [0, 1], got {v}")
    if v == 1.0:
        return DB_CAP
    return min(DB_CAP, float(-10.0 * np.log10(1.0 - v)))


def _gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a 2-D image."""
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def _ssim_parts(a: np.ndarray, b: np.ndarray, peak: float) -> tuple[float, float]:
    """Mean luminance*contrast-structure (SSIM) and mean contrast-structure."""
    g = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def msssim_scales(height: int, width: int) -> int:
    """Number of pyramid levels whose short side still fits the window."""
    side, levels = min(height, width), 0
    while levels < len(MSSSIM_WEIGHTS) and side >= WINDOW:
        levels += 1
        side //= 2
    return levels


def _ms_ssim_channel(a: np.ndarray, b: np.ndarray, peak: float, weights: np.ndarray) -> float:
    value = 1.0
    for level, w in enumerate(weights):
        ssim, cs = _ssim_parts(a, b, peak)
        term = ssim if level == len(weights) - 1 else cs
        value *= max(term, 0.0) ** w
        a, b = _downsample(a), _downsample(b)
    return value


def ms_ssim(x, x_hat, peak: float = 1.0) -> float:
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 3:
        raise ValueError(f"expected [C,H,W] or [H,W] images, got shape {x.shape}")
    levels = msssim_scales(x.shape[1], x.shape[2])
    if levels == 0:
        raise ValueError(f"image {x.shape[1]}x{x.shape[2]} is smaller than the {WINDOW}-tap window")
    weights = np.asarray(MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    vals = [_ms_ssim_channel(x[c], x_hat[c], peak, weights) for c in range(x.shape[0])]
    return float(np.clip(np.mean(vals), 0.0, 1.0))
