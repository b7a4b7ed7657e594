"""Outer gradient descent on the log-weights with warm-started lower solves.

Each outer iteration solves the denoising problem at the current ``beta``
(starting from the previous minimiser), evaluates the upper loss, takes a
fixed-size step along the implicit hypergradient and clips ``beta`` so that
``exp(beta)`` never exceeds ``lambda_cap``.

Termination happens when the ``beta`` update is small, when the optional
whiteness floor is crossed, or at ``max_outer_iters``. On a floor crossing
the previous iterate is returned, since it is the last one whose residual
whiteness was still at or above the threshold.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .energy import TV_EPSILON, WTV_EPSILON, ParamMap
from .hypergrad import DEFAULT_CG_MAX_ITERS, DEFAULT_CG_TOL, evaluate_loss, hypergrad
from .io import save_field
from .lower import DEFAULT_MAX_ITERS, sc_agd
from .metrics import ipsnr, issim

log = logging.getLogger(__name__)

STEP_SCALINGS = ("normalized", "raw")
TRACE_COLUMNS = ("iter", "Q", "delta_beta", "lambda_min", "lambda_max", "lambda_mean",
                 "ipsnr", "issim", "lower_iters", "cg_iters", "seconds")


class BilevelAborted(FloatingPointError):
    """A non-finite loss or parameter was produced; ``trace`` holds the completed iterations."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class BilevelConfig:
    loss: str = "whiteness"
    mode: str = "per_pixel"
    eta: float = 1000.0
    eps_outer: float = 1e-6
    tol_lower: float = 1e-6
    max_outer_iters: int = 3000
    lambda_cap: float = 5.0
    stop_threshold: float | None = None
    epsilon: float = WTV_EPSILON
    beta0: float = 1.0
    max_lower_iters: int = DEFAULT_MAX_ITERS
    cg_tol: float = DEFAULT_CG_TOL
    cg_max_iters: int = DEFAULT_CG_MAX_ITERS
    warm_start: bool = True
    step_scaling: str = "normalized"

    def __post_init__(self):
        if self.loss == "white":
            self.loss = "whiteness"
        if self.loss not in ("whiteness", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mode not in ("scalar", "per_pixel"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("eta", "eps_outer", "tol_lower", "lambda_cap", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.step_scaling not in STEP_SCALINGS:
            raise ValueError(f"unknown step_scaling {self.step_scaling!r}")

    @classmethod
    def for_method(cls, loss: str = "whiteness", reg: str = "wtv", **overrides) -> "BilevelConfig":
        """Standard settings: eta 1000 (whiteness) / 100 (MSE); epsilon 0.1 (WTV) / 0.01 (TV)."""
        loss = "whiteness" if loss in ("white", "whiteness") else loss
        if reg not in ("wtv", "tv"):
            raise ValueError(f"unknown regulariser {reg!r}")
        base = dict(
            loss=loss,
            mode="per_pixel" if reg == "wtv" else "scalar",
            eta=1000.0 if loss == "whiteness" else 100.0,
            epsilon=WTV_EPSILON if reg == "wtv" else TV_EPSILON,
        )
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    @property
    def beta_cap(self) -> float:
        return math.log(self.lambda_cap)

    def step_factor(self, n: int) -> float:
        """Multiplier applied to ``eta * grad`` for an image with ``n`` pixels.

        ``"normalized"`` measures the MSE loss as a plain sum of squares and
        the scalar-mode gradient as a per-pixel mean, which keeps the standard
        step sizes (1000 / 100) on the same scale across all four methods.
        ``"raw"`` steps along the literal gradient of the loss as defined.
        """
        if self.step_scaling == "raw":
            return 1.0
        factor = float(n) if self.loss == "mse" else 1.0
        return factor / n if self.mode == "scalar" else factor


@dataclass
class TraceRecord:
    iter: int
    Q: float
    delta_beta: float
    lambda_min: float
    lambda_max: float
    lambda_mean: float
    ipsnr: float = math.nan
    issim: float = math.nan
    lower_iters: int = 0
    cg_iters: int = 0
    seconds: float = 0.0


@dataclass
class BilevelResult:
    params: ParamMap
    x: np.ndarray
    trace: list[TraceRecord]
    stop_reason: str
    final_q: float
    next_q: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def lam(self):
        return self.params.lam


def early_stop_check(delta_beta_norm: float, q_white: float, cfg: BilevelConfig) -> bool:
    """True while the outer loop should continue under the whiteness-floor rule."""
    if cfg.stop_threshold is None:
        raise ValueError("early_stop_check needs cfg.stop_threshold")
    return delta_beta_norm > cfg.eps_outer and q_white >= cfg.stop_threshold


def project_beta(beta, cap: float):
    return np.minimum(beta, cap) if isinstance(beta, np.ndarray) else min(beta, cap)


def initial_params(shape, cfg: BilevelConfig) -> ParamMap:
    return ParamMap.constant(min(cfg.beta0, cfg.beta_cap), shape, cfg.mode)


def gd_bil(y, cfg: BilevelConfig, beta0: ParamMap | None = None, x_ref=None,
           monitor_ssim: bool = True, snapshot_dir=None, snapshot_stride: int = 0,
           callback=None) -> BilevelResult:
    """Run the outer gradient descent on ``beta`` for noisy data ``y``.

    ``x_ref`` is required for the MSE loss; for the whiteness loss it is used
    only to monitor IPSNR/ISSIM, which never affects the iterates.
    ``callback(record, params, x)`` is invoked after every completed iteration.
    """
    y = np.asarray(y, dtype=np.float64)
    if cfg.loss == "mse" and x_ref is None:
        raise ValueError("the MSE loss needs a reference image")
    params = beta0 if beta0 is not None else initial_params(y.shape, cfg)
    if params.mode != cfg.mode:
        raise ValueError(f"beta0 mode {params.mode!r} does not match config mode {cfg.mode!r}")
    if snapshot_dir is not None and snapshot_stride > 0:
        snapshot_dir = Path(snapshot_dir)
        snapshot_dir.mkdir(parents=True, exist_ok=True)

    step = cfg.eta * cfg.step_factor(y.size)
    trace: list[TraceRecord] = []
    x_warm = y
    prev = None  # (params, x, q) of the last completed iteration
    delta = math.nan
    t_start = time.perf_counter()
    i = 0
    while True:
        lower = sc_agd(x_warm if cfg.warm_start else y, y, params, cfg.epsilon,
                       tol=cfg.tol_lower, max_iters=cfg.max_lower_iters)
        x = lower.x_star
        q = evaluate_loss(cfg.loss, x, y, x_ref).value
        if not (math.isfinite(q) and np.all(np.isfinite(params.beta))):
            raise BilevelAborted(f"non-finite loss or beta at outer iteration {i}", trace)
        if prev is not None:
            if (cfg.stop_threshold is not None and cfg.loss == "whiteness"
                    and q < cfg.stop_threshold):
                p_prev, x_prev, q_prev = prev
                return BilevelResult(p_prev, x_prev, trace, "whiteness_floor", q_prev, next_q=q)
            if delta <= cfg.eps_outer:
                return BilevelResult(params, x, trace, "converged", q)
        if i >= cfg.max_outer_iters:
            return BilevelResult(params, x, trace, "max_iters", q)

        hg = hypergrad(x, y, params, cfg.epsilon, cfg.loss, x_ref, cg_tol=cfg.cg_tol,
                       cg_max_iters=cfg.cg_max_iters)
        if not hg.cg_converged:
            log.warning("CG did not converge at outer iteration %d (residual %.3g)", i, hg.cg_residual)
        new_beta = project_beta(params.beta - step * hg.grad_beta, cfg.beta_cap)
        if not np.all(np.isfinite(new_beta)):
            raise BilevelAborted(f"non-finite beta update at outer iteration {i}", trace)
        delta = float(np.linalg.norm(np.ravel(np.asarray(new_beta) - params.beta)))

        lam = params.lam
        rec = TraceRecord(
            iter=i, Q=q, delta_beta=delta,
            lambda_min=float(np.min(lam)), lambda_max=float(np.max(lam)),
            lambda_mean=float(np.mean(lam)),
            lower_iters=lower.iterations, cg_iters=hg.cg_iterations,
            seconds=time.perf_counter() - t_start,
        )
        if x_ref is not None:
            rec.ipsnr = ipsnr(x, y, x_ref)
            if monitor_ssim:
                rec.issim = issim(x, y, x_ref)
        trace.append(rec)
        if snapshot_dir is not None and snapshot_stride > 0 and i % snapshot_stride == 0:
            save_field(snapshot_dir / f"beta_{i:05d}.f64", params.beta,
                       {"kind": "beta", "notes": f"outer iteration {i}"})
        if callback is not None:
            callback(rec, params, x)

        prev = (params, x, q)
        params = params.with_beta(new_beta)
        x_warm = x
        i += 1


def write_trace_csv(path, trace, timing: bool = True) -> None:
    """Write the trace with a header row; ``timing=False`` zeroes the seconds column."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            row = asdict(rec)
            if not timing:
                row["seconds"] = 0.0
            w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def read_trace_csv(path) -> list[TraceRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append(TraceRecord(
            iter=int(r["iter"]), Q=float(r["Q"]), delta_beta=float(r["delta_beta"]),
            lambda_min=float(r["lambda_min"]), lambda_max=float(r["lambda_max"]),
            lambda_mean=float(r["lambda_mean"]), ipsnr=float(r["ipsnr"]), issim=float(r["issim"]),
            lower_iters=int(r["lower_iters"]), cg_iters=int(r["cg_iters"]), seconds=float(r["seconds"]),
        ))
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
