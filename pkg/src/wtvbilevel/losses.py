"""Upper-level quality measures and their gradients with respect to the reconstruction.

Both losses have the form ``0.5 * ||rho(x)||^2``: the supervised one uses the
scaled error against a reference, the unsupervised one the sample normalised
circular autocorrelation of the residual ``r = y - x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

ZERO_RESIDUAL_TOL = 1e-300


class NullResidualError(ValueError):
    """The normalised autocorrelation is undefined for a zero residual."""


@dataclass
class LossEval:
    value: float
    grad_x: np.ndarray


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def circular_xcorr(a, b) -> np.ndarray:
    """``out[j1, j2] = sum_k a[k1, k2] * b[(j1 + k1) % n1, (j2 + k2) % n2]``, via real FFTs."""
    _same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = a.shape
    fa = fft.rfft2(a)
    fb = fft.rfft2(b)
    return fft.irfft2(np.conj(fa) * fb, s=s)


def autocorrelation(r) -> tuple[np.ndarray, float]:
    """Return ``(gamma, ||r||^2)`` with ``gamma = (r * r) / ||r||^2`` (circular)."""
    r = np.asarray(r, dtype=np.float64)
    norm_sq = float(np.sum(r * r))
    if norm_sq < ZERO_RESIDUAL_TOL * r.size:
        raise NullResidualError("residual autocorrelation is not defined for a null residual")
    fr = fft.rfft2(r)
    gamma = fft.irfft2(fr.real**2 + fr.imag**2, s=r.shape) / norm_sq
    return gamma, norm_sq


def whiteness_value(x_star, y) -> float:
    _same_shape(x_star, y)
    gamma, _ = autocorrelation(np.asarray(y) - x_star)
    return 0.5 * float(np.sum(gamma * gamma))


def whiteness_eval(x_star, y) -> LossEval:
    """Residual whiteness ``0.5 * ||gamma(y - x)||^2`` and its gradient in ``x``.

    With ``A = r * r`` (symmetric in the lag) the derivative in ``r`` is
    ``(2 / ||r||^2) * (xcorr(gamma, r) - 2 Q r)``; ``dr/dx = -I`` flips the sign.
    """
    _same_shape(x_star, y)
    r = np.asarray(y, dtype=np.float64) - x_star
    gamma, norm_sq = autocorrelation(r)
    q = 0.5 * float(np.sum(gamma * gamma))
    dq_dr = (2.0 / norm_sq) * (circular_xcorr(gamma, r) - 2.0 * q * r)
    return LossEval(q, -dq_dr)


def mse_eval(x_star, x_ref) -> LossEval:
    """``0.5 * ||(x - x_ref) / sqrt(n)||^2`` and its gradient ``(x - x_ref) / n``."""
    _same_shape(x_star, x_ref)
    e = np.asarray(x_star, dtype=np.float64) - x_ref
    n = e.size
    return LossEval(0.5 * float(np.sum(e * e)) / n, e / n)
