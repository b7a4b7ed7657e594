"""Command-line front end.

Subcommands: ``add-noise``, ``denoise``, ``calibrate`` and ``benchmark``.
Options can also come from a ``--config`` file of ``key = value`` lines;
explicit flags take precedence over the file, which takes precedence over
the built-in defaults.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .bilevel import BilevelAborted, BilevelConfig, gd_bil, write_trace_csv
from .calibration import (
    DEFAULT_BUDGET,
    DEFAULT_CROP,
    CalibrationError,
    Threshold,
    calibrate_threshold,
    calibration_config,
    format_records,
    load_dataset,
)
from .imaging import RNG_ALGORITHM, NoiseSpec, center_crop, sample_noise
from .io import FieldFormatError, ImageFormatError, load_field, load_image, save_field, save_image, sidecar_path
from .metrics import ipsnr, issim, psnr

log = logging.getLogger("wtvbilevel")

WORKERS_ENV = "WTVBILEVEL_WORKERS"
LOG_LAMBDA_FLOOR = -10.0
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def positive_float(text):
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text!r}")
    return v


def float_list(text):
    try:
        vals = [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def int_list(text):
    try:
        vals = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("seeds must be non-negative")
    return vals


def method_list(text):
    vals = [t for t in text.replace(" ", "").split(",") if t]
    bad = [v for v in vals if v not in bench.METHODS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {','.join(bench.METHODS)}")
    return vals


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def read_array(path) -> tuple[np.ndarray, dict]:
    """Load a raw field (if it has a sidecar) or a raster image."""
    path = Path(path)
    if sidecar_path(path).exists():
        return load_field(path)
    return load_image(path), {"kind": "image", "source": str(path)}


# ---------------------------------------------------------------- add-noise

def cmd_add_noise(args) -> int:
    x, _ = read_array(args.input)
    spec = NoiseSpec(args.kind, args.sigma, args.seed)
    e = sample_noise(x.shape, spec)
    y = x + e
    header = {
        "kind": "noisy", "noise_kind": args.kind, "sigma": args.sigma, "seed": args.seed,
        "rng": RNG_ALGORITHM, "max_abs_noise": float(np.max(np.abs(e))), "source": str(args.input),
        "notes": "unclipped data y = x + e",
    }
    save_field(args.output, y, header)
    preview = args.preview or Path(args.output).with_suffix(".png")
    save_image(y, preview)
    print(f"wrote {args.output} ({x.shape[0]}x{x.shape[1]}, {args.kind} sigma={args.sigma:g} "
          f"seed={args.seed}, max|e|={header['max_abs_noise']:.6g}) and preview {preview}")
    return EXIT_OK


# ------------------------------------------------------------------ denoise

def load_threshold(path) -> float:
    try:
        return Threshold.load(path).q_bar
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read threshold file {path}: {exc}")


def denoise_config(args) -> BilevelConfig:
    loss = "whiteness" if args.loss == "white" else "mse"
    q_bar = None
    if loss == "whiteness" and not args.no_early_stop:
        if args.threshold_file is None:
            raise UsageError("--threshold-file is required for --loss white (or pass --no-early-stop)")
        q_bar = load_threshold(args.threshold_file)
    return BilevelConfig.for_method(
        loss, args.reg, epsilon=args.epsilon, eta=args.eta, beta0=args.beta0,
        lambda_cap=args.lambda_cap, tol_lower=args.tol, eps_outer=args.outer_eps,
        max_outer_iters=args.max_iters, stop_threshold=q_bar, step_scaling=args.step_scaling,
    )


def lambda_preview(lam) -> np.ndarray:
    """log(lambda) clipped below at -10 and mapped to [0, 1] (1 at the largest value)."""
    logl = np.maximum(np.log(lam), LOG_LAMBDA_FLOOR)
    hi = max(float(np.max(logl)), LOG_LAMBDA_FLOOR + 1e-12)
    return (logl - LOG_LAMBDA_FLOOR) / (hi - LOG_LAMBDA_FLOOR)


def cmd_denoise(args) -> int:
    y, _ = read_array(args.input)
    x_ref = None
    if args.reference is not None:
        x_ref, _ = read_array(args.reference)
        if x_ref.shape != y.shape:
            raise UsageError(f"reference shape {x_ref.shape} does not match data {y.shape}")
    if args.loss == "mse" and x_ref is None:
        raise UsageError("--loss mse needs --reference")
    cfg = denoise_config(args)
    res = gd_bil(y, cfg, x_ref=x_ref, monitor_ssim=x_ref is not None)

    if args.out_image:
        out = Path(args.out_image)
        if out.suffix == ".f64":
            save_field(out, res.x, {"kind": "denoised", "notes": f"stop={res.stop_reason}"})
        else:
            save_image(res.x, out)
    if args.out_lambda:
        lam = np.broadcast_to(res.lam, y.shape)
        save_field(args.out_lambda, lam, {"kind": "lambda", "mode": cfg.mode, "lambda_cap": cfg.lambda_cap,
                                           "stop_reason": res.stop_reason})
        preview = args.lambda_preview or Path(args.out_lambda).with_suffix(".png")
        save_image(lambda_preview(lam), preview)
    if args.out_trace:
        write_trace_csv(args.out_trace, res.trace, timing=not args.deterministic)

    lam = np.asarray(res.lam)
    msg = (f"stop={res.stop_reason} outer_iters={len(res.trace)} Q={res.final_q:.6g} "
           f"lambda[min,mean,max]=[{lam.min():.4g}, {lam.mean():.4g}, {lam.max():.4g}]")
    if x_ref is not None:
        msg += (f" PSNR={psnr(res.x, x_ref):.3f} IPSNR={ipsnr(res.x, y, x_ref):.3f}"
                f" ISSIM={issim(res.x, y, x_ref):.4f}")
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------- calibrate

def cmd_calibrate(args) -> int:
    dataset = load_dataset(args.dataset_dir, crop=args.crop)
    cfg = calibration_config(args.budget, step_scaling=args.step_scaling)
    th = calibrate_threshold(dataset, args.sigmas, args.seeds, cfg=cfg,
                             dataset_name=args.name or Path(args.dataset_dir).name,
                             noise_kind=args.kind, workers=args.workers)
    th.meta["crop"] = args.crop
    th.save(args.out)
    print(format_records(th))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- benchmark

def benchmark_images(paths, crop):
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(load_dataset(p, crop=crop))
        else:
            x, _ = read_array(p)
            if crop is not None and min(x.shape) > crop:
                x = center_crop(x, crop)
            out.append((p.stem, x))
    if not out:
        raise UsageError("no benchmark images given")
    return out


def cmd_benchmark(args) -> int:
    q_bar = None
    if any(m.endswith("white") for m in args.methods):
        if args.threshold_file is None:
            raise UsageError("--threshold-file is required for the whiteness methods")
        q_bar = load_threshold(args.threshold_file)
    images = benchmark_images(args.images, args.crop)
    overrides = {"step_scaling": args.step_scaling}
    if args.max_iters is not None:
        overrides["max_outer_iters"] = args.max_iters
    cells = bench.run_benchmark(images, args.sigmas, args.methods, q_bar=q_bar, seed=args.seed,
                                noise_kind=args.kind, workers=args.workers, overrides=overrides)
    bench.write_table_csv(args.out, cells, args.methods)
    runs = args.runs_out or Path(args.out).with_name(Path(args.out).stem + "_runs.csv")
    bench.write_runs_csv(runs, cells, timing=not args.deterministic)
    if args.plot_dir:
        bench.write_plot_data(args.plot_dir, cells, timing=not args.deterministic)
    for c in cells:
        tag = c.status if c.status == "ok" else f"FAILED ({c.error})"
        print(f"{c.image:<20} sigma={c.sigma:<5g} {c.method:<10} IPSNR={c.ipsnr:7.3f} "
              f"ISSIM={c.issim:6.3f} iters={c.outer_iters:<5d} {tag}")
    print(f"wrote {args.out} and {runs}")
    return EXIT_OK if all(c.status == "ok" for c in cells) else EXIT_FAILURE


# ------------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="file of 'key = value' lines supplying option defaults")
    p.add_argument("--deterministic", action="store_true",
                   help="zero wall-clock columns so repeated runs give identical files")
    p.add_argument("--step-scaling", choices=("normalized", "raw"), default="normalized",
                   help="how eta is applied to the hypergradient (see README)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wtvbilevel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("add-noise", help="synthesise noisy data from a clean image")
    p.add_argument("input")
    p.add_argument("output", help="raw float64 field for the (unclipped) noisy data")
    p.add_argument("--kind", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--sigma", type=positive_float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preview", help="8-bit preview image (default: OUTPUT with .png suffix)")
    _common(p)
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("denoise", help="learn lambda by bilevel descent and denoise")
    p.add_argument("input", help="noisy data: raw field or image")
    p.add_argument("--loss", choices=("white", "mse"), default="white")
    p.add_argument("--reg", choices=("wtv", "tv"), default="wtv")
    p.add_argument("--epsilon", type=positive_float, help="Huber knee (default 0.1 wtv, 0.01 tv)")
    p.add_argument("--eta", type=positive_float, help="outer step (default 1000 white, 100 mse)")
    p.add_argument("--beta0", type=float, default=1.0)
    p.add_argument("--lambda-cap", type=positive_float, default=5.0)
    p.add_argument("--tol", type=positive_float, default=1e-6, help="lower solver tolerance")
    p.add_argument("--outer-eps", type=positive_float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=3000)
    p.add_argument("--threshold-file")
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--reference", help="clean image; required for --loss mse")
    p.add_argument("--out-image")
    p.add_argument("--out-lambda", help="raw float64 field for the lambda map")
    p.add_argument("--lambda-preview", help="log-scale preview (default: OUT_LAMBDA with .png suffix)")
    p.add_argument("--out-trace")
    _common(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("calibrate", help="estimate the whiteness stopping threshold")
    p.add_argument("dataset_dir")
    p.add_argument("--sigmas", type=float_list, default=[0.01, 0.05, 0.1])
    p.add_argument("--seeds", type=int_list, default=[0])
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--crop", type=int, default=DEFAULT_CROP)
    p.add_argument("--kind", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--name", help="dataset name recorded in the threshold file")
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("benchmark", help="run the method x sigma comparison grid")
    p.add_argument("images", nargs="+", help="clean images or directories of them")
    p.add_argument("--sigmas", type=float_list, default=list(bench.DEFAULT_SIGMAS))
    p.add_argument("--methods", type=method_list, default=list(bench.METHODS))
    p.add_argument("--threshold-file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--crop", type=int, default=DEFAULT_CROP)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--out", required=True)
    p.add_argument("--runs-out", help="per-run CSV (default: OUT stem + _runs.csv)")
    p.add_argument("--plot-dir", help="write trace data and a gnuplot script here")
    _common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def apply_config_file(sub: argparse.ArgumentParser, path) -> None:
    """Turn ``key = value`` lines into parser defaults (flags still win)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    try:
        cp.read_string("[options]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}")
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cp["options"].items():
        dest = key.strip().replace("-", "_")
        value = raw.strip().strip('"').strip("'")
        action = actions.get(dest)
        if action is None or dest in ("config", "func", "help"):
            raise UsageError(f"unknown option {key!r} in config file {path}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"option {key!r} expects true/false")
            defaults[dest] = value.lower() in ("true", "1", "yes")
        elif action.nargs in ("+", "*"):
            defaults[dest] = value.split()
        else:
            defaults[dest] = value  # argparse applies the type to string defaults
    sub.set_defaults(**defaults)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        apply_config_file(sub, args.config)
        args = parser.parse_args(argv)
    return parser, args


def main(argv=None) -> int:
    try:
        parser, args = parse_args(argv)
    except UsageError as exc:
        print(f"wtvbilevel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wtvbilevel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BilevelAborted as exc:
        print(f"wtvbilevel: aborted after {len(exc.trace)} outer iterations: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ImageFormatError, FieldFormatError, CalibrationError, ValueError,
            ArithmeticError, RuntimeError) as exc:
        print(f"wtvbilevel: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
