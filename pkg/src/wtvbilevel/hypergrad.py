"""Gradient of an upper-level loss with respect to the log-weights ``beta``.

At the lower-level minimiser ``x*`` the stationarity condition
``grad_x F(x*, lam) = 0`` gives, by the implicit function theorem,

    grad_beta Q = -lam * C^T H^{-1} grad_x Q(x*)

with ``H`` the energy Hessian and ``C = d(grad_x F)/d lam``. ``H`` is applied
matrix-free and inverted with conjugate gradients; ``C^T`` reduces to a
per-pixel inner product because the energy is linear in ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .energy import HessianOperator, ParamMap, _grad_scale, _norms
from .imaging import grad_apply
from .losses import LossEval, mse_eval, whiteness_eval

DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_MAX_ITERS = 2000


class HypergradientError(RuntimeError):
    pass


@dataclass
class HessSolve:
    w: np.ndarray
    iterations: int
    residual: float
    converged: bool


@dataclass
class HypergradResult:
    grad_beta: float | np.ndarray
    cg_iterations: int
    cg_residual: float
    w: np.ndarray
    loss: LossEval
    cg_converged: bool = True


def hess_solve(x_star, p: ParamMap, epsilon: float, rhs, cg_tol=DEFAULT_CG_TOL,
               cg_max_iters=DEFAULT_CG_MAX_ITERS, x0=None) -> HessSolve:
    """Solve ``H(x_star) w = rhs`` by conjugate gradients to relative residual ``cg_tol``."""
    if not cg_tol > 0:
        raise ValueError("cg_tol must be positive")
    shape = np.shape(x_star)
    H = HessianOperator(x_star, p, epsilon)
    n = int(np.prod(shape))
    op = LinearOperator((n, n), matvec=lambda v: H(v.reshape(shape)).ravel(), dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64).ravel()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return HessSolve(np.zeros(shape), 0, 0.0, True)
    count = [0]

    def tick(_):
        count[0] += 1

    w, _ = cg(op, b, x0=None if x0 is None else np.ravel(x0), rtol=cg_tol, atol=0.0,
              maxiter=cg_max_iters, callback=tick)
    w = w.reshape(shape)
    res = float(np.linalg.norm(H(w).ravel() - b))
    return HessSolve(w, count[0], res, res <= cg_tol * b_norm * (1 + 1e-6))


def cross_jacobian_transpose(x_star, epsilon: float, w) -> np.ndarray:
    """Entry ``j`` is ``<grad h((D x*)_j), (D w)_j>``, i.e. ``C^T w`` up to the weights."""
    v = grad_apply(x_star)
    dw = grad_apply(w)
    phi = _grad_scale(_norms(v), epsilon)
    return phi * (v[0] * dw[0] + v[1] * dw[1])


def evaluate_loss(loss: str, x_star, y, x_ref=None) -> LossEval:
    if loss in ("whiteness", "white"):
        return whiteness_eval(x_star, y)
    if loss == "mse":
        if x_ref is None:
            raise ValueError("the MSE loss needs a reference image")
        return mse_eval(x_star, x_ref)
    raise ValueError(f"unknown loss {loss!r}")


def hypergrad(x_star, y, p: ParamMap, epsilon: float, loss: str = "whiteness", x_ref=None,
              cg_tol: float = DEFAULT_CG_TOL, cg_max_iters: int = DEFAULT_CG_MAX_ITERS,
              strict: bool = False) -> HypergradResult:
    """Implicit-differentiation gradient of ``loss`` in ``beta`` at the minimiser ``x_star``.

    In scalar mode the per-pixel contributions are summed. If CG stalls the
    best iterate is used and ``cg_converged`` is False; ``strict=True`` raises
    instead.
    """
    ev = evaluate_loss(loss, x_star, y, x_ref)
    sol = hess_solve(x_star, p, epsilon, ev.grad_x, cg_tol, cg_max_iters)
    if strict and not sol.converged:
        raise HypergradientError(f"CG did not reach rtol {cg_tol} in {cg_max_iters} iterations")
    c = cross_jacobian_transpose(x_star, epsilon, sol.w)
    lam = p.lam
    if p.mode == "scalar":
        g = -lam * float(np.sum(c))
    else:
        g = -lam * c
    return HypergradResult(g, sol.iterations, sol.residual, sol.w, ev, sol.converged)
