"""Strongly convex Nesterov accelerated gradient descent for the lower-level problem."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .energy import ParamMap, energy_grad, lipschitz_bound

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 50_000
STOP_RULE = "||x_{t+1} - x_t|| <= tol * max(1, ||x_t||)"


class LowerSolverDiverged(FloatingPointError):
    pass


@dataclass
class LowerSolveResult:
    x_star: np.ndarray
    iterations: int
    final_step_norm: float
    grad_norm: float
    step_size: float
    converged: bool = True
    meta: dict = field(default_factory=dict)


def theta_update(theta: float, kappa: float) -> float:
    a = 1.0 - kappa * theta * theta
    return 0.5 * (a + math.sqrt(a * a + 4.0 * theta * theta))


def momentum(theta: float, theta_next: float, tau: float, mu: float = 1.0) -> float:
    return (theta - 1.0) / theta_next * (1.0 - theta_next * mu * tau) / (1.0 - tau * mu)


def sc_agd(
    x0,
    y,
    p: ParamMap,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    mu: float = 1.0,
    lipschitz: float | None = None,
) -> LowerSolveResult:
    """Minimise the smoothed WTV energy from ``x0`` with a fixed step ``1/L``.

    ``L`` defaults to the closed-form bound at the current ``lambda_max``. The
    loop has do-while semantics: at least one gradient step is taken before
    the step-norm test ``||x_{t+1} - x_t|| <= tol * max(1, ||x_t||)``.
    When ``max_iters`` is hit the last iterate is returned with
    ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    L = lipschitz if lipschitz is not None else lipschitz_bound(p.lambda_max, epsilon)
    tau = 1.0 / L
    kappa = mu / L
    theta = 1.0
    x_prev = np.array(x0, dtype=np.float64)
    x = x_prev.copy()
    step_norm = math.inf
    converged = False
    t = 0
    while t < max_iters:
        theta_next = theta_update(theta, kappa)
        beta = momentum(theta, theta_next, tau, mu)
        z = x - x_prev
        z *= beta
        z += x
        x_next = z - tau * energy_grad(z, y, p, epsilon)
        diff = x_next - x
        step_norm = float(np.sqrt(np.sum(diff * diff)))
        if not math.isfinite(step_norm):
            raise LowerSolverDiverged(f"non-finite iterate after {t + 1} iterations")
        x_norm = float(np.sqrt(np.sum(x * x)))
        x_prev, x = x, x_next
        theta = theta_next
        t += 1
        if step_norm <= tol * max(1.0, x_norm):
            converged = True
            break
    g = energy_grad(x, y, p, epsilon)
    return LowerSolveResult(
        x_star=x,
        iterations=t,
        final_step_norm=step_norm,
        grad_norm=float(np.sqrt(np.sum(g * g))),
        step_size=tau,
        converged=converged,
        meta={"stop_rule": STOP_RULE, "tol": tol, "lipschitz": L},
    )
