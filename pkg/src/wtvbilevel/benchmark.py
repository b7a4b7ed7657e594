"""Method x noise-level comparison grid.

Each cell denoises one synthetic noisy image with one of four methods:
{TV, WTV} regulariser x {supervised MSE, unsupervised whiteness} loss. All
methods of an (image, sigma) pair see the same noise realisation.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bilevel import BilevelConfig, gd_bil, write_trace_csv
from .calibration import derive_seed
from .imaging import NoiseSpec, add_noise
from .metrics import ipsnr, issim

log = logging.getLogger(__name__)

METHODS = ("tv-mse", "wtv-mse", "tv-white", "wtv-white")
DEFAULT_SIGMAS = (0.03, 0.06, 0.09)
# column order of the comparison table: supervised TV, WTV then unsupervised TV, WTV
TABLE_ORDER = ("tv-mse", "wtv-mse", "tv-white", "wtv-white")
RUN_COLUMNS = ("image", "sigma", "method", "seed", "noise_seed", "noise_kind", "ipsnr", "issim",
               "outer_iters", "stop_reason", "lambda_min", "lambda_mean", "lambda_max",
               "final_q", "seconds", "status", "error")


def parse_method(method: str) -> tuple[str, str]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    reg, loss = method.split("-")
    return reg, ("whiteness" if loss == "white" else "mse")


def method_config(method: str, q_bar: float | None = None, **overrides) -> BilevelConfig:
    reg, loss = parse_method(method)
    if loss == "whiteness":
        if q_bar is None:
            raise ValueError(f"{method} needs a stopping threshold")
        overrides["stop_threshold"] = q_bar
    return BilevelConfig.for_method(loss, reg, **overrides)


@dataclass
class CellResult:
    image: str
    sigma: float
    method: str
    seed: int
    noise_seed: int
    noise_kind: str
    ipsnr: float = math.nan
    issim: float = math.nan
    outer_iters: int = 0
    stop_reason: str = ""
    lambda_min: float = math.nan
    lambda_mean: float = math.nan
    lambda_max: float = math.nan
    final_q: float = math.nan
    seconds: float = 0.0
    status: str = "ok"
    error: str = ""
    trace: list = field(default_factory=list, repr=False)


def run_cell(image_id: str, x_ref, sigma: float, method: str, seed: int = 0, q_bar=None,
             noise_kind: str = "gaussian", overrides: dict | None = None) -> CellResult:
    """Run one grid cell; failures are reported in ``status`` rather than raised."""
    noise_seed = derive_seed(seed, image_id, sigma)
    out = CellResult(image_id, float(sigma), method, int(seed), noise_seed, noise_kind)
    t0 = time.perf_counter()
    try:
        cfg = method_config(method, q_bar, **(overrides or {}))
        y = add_noise(x_ref, NoiseSpec(noise_kind, sigma, noise_seed))
        res = gd_bil(y, cfg, x_ref=x_ref, monitor_ssim=False)
        lam = res.lam
        out.ipsnr = ipsnr(res.x, y, x_ref)
        out.issim = issim(res.x, y, x_ref)
        out.outer_iters = len(res.trace)
        out.stop_reason = res.stop_reason
        out.lambda_min, out.lambda_mean, out.lambda_max = (float(np.min(lam)), float(np.mean(lam)),
                                                           float(np.max(lam)))
        out.final_q = res.final_q
        out.trace = res.trace
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("cell %s sigma=%g %s failed: %s", image_id, sigma, method, exc)
        out.status = "failed"
        out.error = f"{type(exc).__name__}: {exc}"
    out.seconds = time.perf_counter() - t0
    return out


def _cell_job(args):
    return run_cell(*args)


def run_benchmark(images, sigmas=DEFAULT_SIGMAS, methods=METHODS, q_bar=None, seed: int = 0,
                  noise_kind: str = "gaussian", workers: int = 1, overrides: dict | None = None):
    """Run the full grid over ``(image_id, clean_image)`` pairs.

    Results come back in (image, sigma, method) order whatever the worker count.
    """
    for m in methods:
        if parse_method(m)[1] == "whiteness" and q_bar is None:
            raise ValueError(f"method {m} needs a stopping threshold")
    jobs = [(iid, np.asarray(img, dtype=np.float64), float(s), m, seed, q_bar, noise_kind, overrides)
            for iid, img in images for s in sigmas for m in methods]
    if workers <= 1 or len(jobs) <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_runs_csv(path, cells, timing: bool = True) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RUN_COLUMNS)
        for c in cells:
            row = asdict(c)
            if not timing:
                row["seconds"] = 0.0
            w.writerow([_fmt(row[k]) for k in RUN_COLUMNS])


def write_table_csv(path, cells, methods=TABLE_ORDER) -> None:
    """One row per (image, sigma) with IPSNR/ISSIM column pairs per method."""
    methods = [m for m in TABLE_ORDER if m in methods]
    grid: dict = {}
    for c in cells:
        grid.setdefault((c.image, c.sigma), {})[c.method] = c
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["image", "sigma"]
        for m in methods:
            header += [f"{m}_ipsnr", f"{m}_issim"]
        w.writerow(header + ["status"])
        for (image, sigma), row in grid.items():
            out = [image, sigma]
            failed = []
            for m in methods:
                c = row.get(m)
                if c is None or c.status != "ok":
                    out += ["", ""]
                    failed.append(m)
                else:
                    out += [f"{c.ipsnr:.3f}", f"{c.issim:.3f}"]
            w.writerow(out + ["ok" if not failed else "failed:" + "+".join(failed)])


GNUPLOT_TEMPLATE = """\
# usage: gnuplot -p {name}
set datafile separator ","
set key autotitle columnhead
set xlabel "outer iteration"
set multiplot layout 1,2
set title "whiteness loss"
plot {q_plots}
set title "IPSNR (dB)"
plot {ip_plots}
unset multiplot
"""


def write_plot_data(directory, cells, timing: bool = True) -> Path:
    """Dump per-run traces as CSV plus a gnuplot script showing Q and IPSNR."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for c in cells:
        if c.status != "ok" or not c.trace:
            continue
        name = f"trace_{c.image}_{c.sigma:g}_{c.method}.csv"
        write_trace_csv(directory / name, c.trace, timing=timing)
        files.append((name, f"{c.image} {c.sigma:g} {c.method}"))
    script = directory / "traces.gp"
    q_plots = ", ".join(f'"{n}" using "iter":"Q" with lines title "{t}"' for n, t in files) or "0"
    ip_plots = ", ".join(f'"{n}" using "iter":"ipsnr" with lines title "{t}"' for n, t in files) or "0"
    script.write_text(GNUPLOT_TEMPLATE.format(name=script.name, q_plots=q_plots, ip_plots=ip_plots))
    return script
