"""Smoothed weighted-TV denoising energy.

``F(x) = 0.5 * ||x - y||^2 + sum_i lam_i * h(grad(x)_i)`` where ``h`` is a C^2
Huber-type smoothing of the Euclidean norm on R^2, quadratic-quartic inside a
disc of radius ``epsilon`` and a shifted norm outside it.

The Huber helpers operate on arrays whose leading axis has length 2 (a single
2-vector or a whole gradient field) and are vectorised over the rest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import grad_adjoint, grad_apply

WTV_EPSILON = 1e-1
TV_EPSILON = 1e-2


@dataclass(frozen=True)
class ParamMap:
    """Log-parameterised regularisation weights, ``lam = exp(beta)``.

    ``beta`` is a float in scalar mode and an ``(n1, n2)`` array in per-pixel
    mode. Both broadcast against images, so callers never branch on mode.
    """

    beta: float | np.ndarray
    mode: str = "per_pixel"

    def __post_init__(self):
        if self.mode not in ("scalar", "per_pixel"):
            raise ValueError(f"unknown parameter mode {self.mode!r}")
        if self.mode == "scalar":
            object.__setattr__(self, "beta", float(self.beta))
        else:
            object.__setattr__(self, "beta", np.array(self.beta, dtype=np.float64))

    @classmethod
    def constant(cls, value: float, shape=None, mode="per_pixel") -> "ParamMap":
        if mode == "scalar":
            return cls(float(value), "scalar")
        return cls(np.full(shape, float(value)), "per_pixel")

    @property
    def lam(self):
        return np.exp(self.beta)

    @property
    def lambda_max(self) -> float:
        return float(np.max(self.lam))

    def with_beta(self, beta) -> "ParamMap":
        return ParamMap(beta, self.mode)


def _check_eps(epsilon):
    if not epsilon > 0:
        raise ValueError("smoothing parameter epsilon must be positive")


def _norms(v):
    return np.sqrt(v[0] * v[0] + v[1] * v[1])


def huber_value(v, epsilon: float):
    _check_eps(epsilon)
    v = np.asarray(v, dtype=np.float64)
    s = _norms(v)
    inner = (0.75 / epsilon) * s**2 - s**4 / (8.0 * epsilon**3)
    return np.where(s < epsilon, inner, s - 0.375 * epsilon)


def _grad_scale(s, epsilon):
    """Per-pixel factor phi with ``grad h(v) = phi * v``."""
    inner = 1.5 / epsilon - s * s / (2.0 * epsilon**3)
    outside = s >= epsilon
    with np.errstate(divide="ignore"):
        outer = 1.0 / np.where(outside, s, 1.0)
    return np.where(outside, outer, inner)


def huber_grad(v, epsilon: float):
    """Gradient of :func:`huber_value`; norm never exceeds 1."""
    _check_eps(epsilon)
    v = np.asarray(v, dtype=np.float64)
    return _grad_scale(_norms(v), epsilon) * v


def _hess_coeffs(s, epsilon):
    """``(phi, psi)`` with ``hess h(v) = phi * I - psi * v v^T``."""
    phi = _grad_scale(s, epsilon)
    outside = s >= epsilon
    psi = np.where(outside, phi**3, 1.0 / epsilon**3)
    return phi, psi


def huber_hess(v, epsilon: float):
    """Hessian of :func:`huber_value` as an array of shape ``(2, 2, ...)``."""
    _check_eps(epsilon)
    v = np.asarray(v, dtype=np.float64)
    phi, psi = _hess_coeffs(_norms(v), epsilon)
    eye = np.eye(2).reshape((2, 2) + (1,) * (v.ndim - 1))
    return phi * eye - psi * v[:, None] * v[None, :]


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


def energy_value(x, y, p: ParamMap, epsilon: float) -> float:
    _check_shapes(x, y)
    r = x - y
    reg = p.lam * huber_value(grad_apply(x), epsilon)
    return float(0.5 * np.sum(r * r) + np.sum(reg))


def energy_grad(x, y, p: ParamMap, epsilon: float) -> np.ndarray:
    """``(x - y) + D^T(diag([lam; lam]) grad H(Dx))``."""
    _check_shapes(x, y)
    v = grad_apply(x)
    v *= p.lam * _grad_scale(_norms(v), epsilon)
    out = grad_adjoint(v)
    out += x
    out -= y
    return out


class HessianOperator:
    """Matrix-free Hessian of the energy at a fixed point ``x``.

    The per-pixel Huber curvature coefficients are computed once, so repeated
    products (as in conjugate gradients) only cost two difference operators.
    """

    def __init__(self, x, p: ParamMap, epsilon: float):
        _check_eps(epsilon)
        self.shape = np.shape(x)
        self.v = grad_apply(x)
        phi, psi = _hess_coeffs(_norms(self.v), epsilon)
        lam = p.lam
        self.lam_phi = lam * phi
        self.lam_psi = lam * psi

    def __call__(self, w) -> np.ndarray:
        _check_shapes(np.empty(self.shape), w)
        u = grad_apply(w)
        v = self.v
        proj = self.lam_psi * (v[0] * u[0] + v[1] * u[1])
        u *= self.lam_phi
        u -= proj * v
        out = grad_adjoint(u)
        out += w
        return out


def hess_vec(x, p: ParamMap, epsilon: float, w) -> np.ndarray:
    return HessianOperator(x, p, epsilon)(w)


def lipschitz_bound(lambda_max: float, epsilon: float) -> float:
    """Upper bound ``1 + 12 * lambda_max / epsilon`` on the energy's gradient Lipschitz constant.

    It combines ``||D||^2 <= 8`` for periodic differences with the Huber
    curvature bound ``3 / (2 * epsilon)``.
    """
    if not lambda_max > 0:
        raise ValueError("lambda_max must be positive")
    _check_eps(epsilon)
    return 1.0 + 12.0 * lambda_max / epsilon
