"""Offline estimation of the whiteness stopping threshold.

For every (image, sigma, seed) triple the unsupervised whiteness run is
carried out without any stopping threshold for a fixed budget, while the
clean reference is used to find the iteration of highest IPSNR. The
threshold is the mean whiteness value at those peak iterations.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bilevel import BilevelConfig, gd_bil
from .imaging import NoiseSpec, add_noise, center_crop
from .io import load_image

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 3000
DEFAULT_CROP = 180
DEFAULT_SIGMAS = (0.01, 0.05, 0.1)
MAX_FAILURE_FRACTION = 0.1
IMAGE_SUFFIXES = (".png", ".pgm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "manifest.txt"


class CalibrationError(RuntimeError):
    """Raised when too many calibration runs fail or the input is unusable."""


@dataclass(frozen=True)
class CalibrationRecord:
    image_id: str
    sigma: float
    seed: int
    noise_seed: int
    peak_iter: int
    peak_ipsnr: float
    q_at_peak: float
    total_iters: int


@dataclass(frozen=True)
class CalibrationFailure:
    image_id: str
    sigma: float
    seed: int
    error: str


@dataclass
class Threshold:
    q_bar: float
    dataset: str
    sigmas: list
    seeds: list
    records: list = field(default_factory=list)
    config_hash: str = ""
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "q_bar": self.q_bar,
            "dataset": self.dataset,
            "sigmas": list(self.sigmas),
            "seeds": list(self.seeds),
            "records": [asdict(r) for r in self.records],
            "config_hash": self.config_hash,
            "failures": [asdict(f) for f in self.failures],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        if "q_bar" not in d:
            raise ValueError("threshold file has no q_bar")
        return cls(
            q_bar=float(d["q_bar"]),
            dataset=d.get("dataset", ""),
            sigmas=list(d.get("sigmas", [])),
            seeds=list(d.get("seeds", [])),
            records=[CalibrationRecord(**r) for r in d.get("records", [])],
            config_hash=d.get("config_hash", ""),
            failures=[CalibrationFailure(**f) for f in d.get("failures", [])],
            meta=dict(d.get("meta", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Threshold":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_seed(seed: int, image_id: str, sigma: float) -> int:
    """Stable 64-bit noise seed for one (seed, image, sigma) run."""
    key = f"{int(seed)}|{image_id}|{float(sigma)!r}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def config_hash(cfg: BilevelConfig, **extra) -> str:
    payload = dict(asdict(cfg), **extra)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def calibration_config(budget: int = DEFAULT_BUDGET, **overrides) -> BilevelConfig:
    """Whiteness / per-pixel settings with no stopping threshold."""
    overrides = {k: v for k, v in overrides.items() if k != "stop_threshold"}
    return BilevelConfig.for_method("whiteness", "wtv", max_outer_iters=budget, **overrides)


def load_dataset(directory, crop: int | None = DEFAULT_CROP) -> list[tuple[str, np.ndarray]]:
    """Read a calibration/benchmark image directory.

    If ``manifest.txt`` exists it lists the files to use, one per line, in
    order; otherwise every image file in the directory is used in name order.
    Images larger than ``crop`` are center-cropped.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CalibrationError(f"not a directory: {directory}")
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        names = [ln.strip() for ln in manifest.read_text().splitlines()]
        files = [directory / n for n in names if n and not n.startswith("#")]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise CalibrationError(f"manifest lists missing files: {missing}")
    else:
        files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CalibrationError(f"no images found in {directory}")
    out = []
    for f in files:
        img = load_image(f)
        if crop is not None and min(img.shape) > crop:
            img = center_crop(img, crop)
        out.append((f.stem, img))
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise CalibrationError("image ids (file stems) must be unique")
    return out


def peak_record(trace, image_id, sigma, seed, noise_seed) -> CalibrationRecord:
    if not trace:
        raise CalibrationError("empty trace")
    ip = np.array([t.ipsnr for t in trace])
    if not np.all(np.isfinite(ip)):
        raise CalibrationError("non-finite IPSNR in trace")
    k = int(np.argmax(ip))  # first maximum on ties
    return CalibrationRecord(image_id, float(sigma), int(seed), int(noise_seed), k,
                             float(ip[k]), float(trace[k].Q), len(trace))


def run_one(job):
    """Worker entry point. Returns a record or a failure, never raises."""
    image_id, x_ref, sigma, seed, cfg, kind = job
    noise_seed = derive_seed(seed, image_id, sigma)
    try:
        y = add_noise(x_ref, NoiseSpec(kind, sigma, noise_seed))
        res = gd_bil(y, cfg, x_ref=x_ref, monitor_ssim=False)
        return peak_record(res.trace, image_id, sigma, seed, noise_seed)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("calibration run %s sigma=%g seed=%d failed: %s", image_id, sigma, seed, exc)
        return CalibrationFailure(image_id, float(sigma), int(seed), f"{type(exc).__name__}: {exc}")


def _run_jobs(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, jobs))


def calibrate_threshold(dataset, sigmas=DEFAULT_SIGMAS, seeds=(0,), cfg: BilevelConfig | None = None,
                        budget: int = DEFAULT_BUDGET, dataset_name: str = "custom",
                        noise_kind: str = "gaussian", workers: int = 1) -> Threshold:
    """Estimate the stopping threshold from a list of ``(image_id, clean_image)`` pairs.

    Every (image, sigma, seed) combination is one run. Failed runs are kept
    in ``Threshold.failures`` and left out of the mean; more than 10% failures
    raises :class:`CalibrationError`. The mean is reduced sequentially over
    records sorted by (image_id, sigma, seed) so it is independent of the
    worker count.
    """
    dataset = list(dataset)
    if not dataset:
        raise CalibrationError("dataset is empty")
    if not sigmas or not seeds:
        raise CalibrationError("need at least one sigma and one seed")
    cfg = cfg if cfg is not None else calibration_config(budget)
    if cfg.loss != "whiteness" or cfg.stop_threshold is not None:
        raise ValueError("calibration needs the whiteness loss without a stopping threshold")

    jobs = [(iid, np.asarray(img, dtype=np.float64), float(s), int(sd), cfg, noise_kind)
            for iid, img in dataset for s in sigmas for sd in seeds]
    results = _run_jobs(jobs, workers)
    records = sorted((r for r in results if isinstance(r, CalibrationRecord)),
                     key=lambda r: (r.image_id, r.sigma, r.seed))
    failures = [r for r in results if isinstance(r, CalibrationFailure)]
    if len(failures) > MAX_FAILURE_FRACTION * len(jobs) or not records:
        raise CalibrationError(f"{len(failures)} of {len(jobs)} calibration runs failed")
    if failures:
        log.warning("excluded %d failed calibration runs", len(failures))

    total = 0.0
    for r in records:
        total += r.q_at_peak
    q_bar = total / len(records)
    shapes = sorted({tuple(np.shape(img)) for _, img in dataset})
    return Threshold(
        q_bar=q_bar, dataset=dataset_name, sigmas=[float(s) for s in sigmas],
        seeds=[int(s) for s in seeds], records=records,
        config_hash=config_hash(cfg, noise_kind=noise_kind),
        failures=failures,
        meta={"budget": cfg.max_outer_iters, "noise_kind": noise_kind, "excluded": len(failures),
              "image_shapes": [list(s) for s in shapes], "q_spread": _spread(records)},
    )


def _spread(records):
    q = [r.q_at_peak for r in records]
    return {"min": min(q), "max": max(q), "std": float(np.std(q))} if q else {}


def format_records(th: Threshold) -> str:
    lines = [f"{'image':<24} {'sigma':>6} {'seed':>5} {'i*':>6} {'IPSNR*':>8} {'Q(i*)':>8} {'iters':>6}"]
    for r in th.records:
        lines.append(f"{r.image_id:<24} {r.sigma:>6g} {r.seed:>5d} {r.peak_iter:>6d} "
                     f"{r.peak_ipsnr:>8.3f} {r.q_at_peak:>8.4f} {r.total_iters:>6d}")
    for f in th.failures:
        lines.append(f"{f.image_id:<24} {f.sigma:>6g} {f.seed:>5d} FAILED {f.error}")
    q = "nan" if math.isnan(th.q_bar) else f"{th.q_bar:.4f}"
    lines.append(f"q_bar = {q} over {len(th.records)} runs ({len(th.failures)} excluded)")
    return "\n".join(lines)
