"""PSNR / SSIM and their improvement over the noisy data (IPSNR / ISSIM).

Images are assumed to live in [0, 1], so the PSNR peak and the SSIM dynamic
range are both 1. SSIM uses the usual 11x11 Gaussian window (std 1.5) with
C1 = 0.01^2 and C2 = 0.03^2; the window wraps around the image borders to
match the periodic convention used by the difference operators.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, i.e. an 11x11 window at sigma 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check(x, ref):
    if np.shape(x) != np.shape(ref):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(ref)}")


def psnr(x, x_ref) -> float:
    """PSNR in dB with peak 1; ``math.inf`` for identical images."""
    _check(x, x_ref)
    e = np.asarray(x, dtype=np.float64) - x_ref
    mse = float(np.mean(e * e))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _window(a):
    return gaussian_filter(a, SSIM_SIGMA, mode="wrap", truncate=SSIM_TRUNCATE)


def ssim_map(x, x_ref) -> np.ndarray:
    _check(x, x_ref)
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_ref, dtype=np.float64)
    mu_a, mu_b = _window(a), _window(b)
    var_a = _window(a * a) - mu_a * mu_a
    var_b = _window(b * b) - mu_b * mu_b
    cov = _window(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(x, x_ref) -> float:
    return float(np.mean(ssim_map(x, x_ref)))


def ipsnr(x_out, y, x_ref) -> float:
    """PSNR gain of ``x_out`` over the data ``y``; ``inf`` if ``x_out`` is exact."""
    if np.array_equal(x_out, y):
        return 0.0
    return psnr(x_out, x_ref) - psnr(y, x_ref)


def issim(x_out, y, x_ref) -> float:
    return ssim(x_out, x_ref) - ssim(y, x_ref)
