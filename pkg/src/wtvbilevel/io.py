"""Raster and raw-field file I/O.

Grayscale images are read from PGM (P2/P5, 8 or 16 bit) or PNG and scaled to
[0, 1] by the maximum representable sample value. Parameter maps and residuals
are stored losslessly as a little-endian float64 raster next to a JSON sidecar.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

LUMA = (0.2126, 0.7152, 0.0722)
MAX_PIXELS = 1 << 28


class ImageFormatError(ValueError):
    """Unsupported, corrupt or oversized raster file."""


class FieldFormatError(ValueError):
    """Raw field raster and sidecar disagree, or the sidecar is missing."""


def _pgm_tokens(data: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 2 or data[:2] not in (b"P2", b"P5"):
        raise ImageFormatError(f"{path}: not a P2/P5 PGM file")
    try:
        (_, w, h, maxval), pos = _pgm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid PGM dimensions or maxval")
    if w * h > MAX_PIXELS:
        raise ImageFormatError(f"{path}: image dimensions overflow ({w}x{h})")
    if data[:2] == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        if len(data) - pos < need:
            raise ImageFormatError(f"{path}: truncated PGM raster")
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    else:
        try:
            raw = np.array(data[pos:].split()[: w * h], dtype=np.int64)
        except ValueError as exc:
            raise ImageFormatError(f"{path}: corrupt ASCII PGM raster") from exc
        if raw.size != w * h:
            raise ImageFormatError(f"{path}: truncated PGM raster")
    if raw.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: sample exceeds maxval")
    return raw.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, x: np.ndarray) -> None:
    q = quantize8(x)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(q.tobytes())


def _read_pil(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.width * im.height > MAX_PIXELS:
                raise ImageFormatError(f"{path}: image dimensions overflow")
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError, PILImage.DecompressionBombError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    if mode in ("1",):
        return arr.astype(np.float64)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) / 65535.0
    if mode in ("L", "LA"):
        arr = arr if arr.ndim == 2 else arr[..., 0]
        return arr.astype(np.float64) / 255.0
    if mode in ("RGB", "RGBA"):
        rgb = arr[..., :3].astype(np.float64) / 255.0
        return rgb @ np.array(LUMA)
    if mode == "P":
        with PILImage.open(path) as im:
            rgb = np.asarray(im.convert("RGB")).astype(np.float64) / 255.0
        return rgb @ np.array(LUMA)
    raise ImageFormatError(f"{path}: unsupported pixel mode {mode}")


def load_image(path) -> np.ndarray:
    """Read a grayscale (or luminance-converted colour) image into [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic in (b"P2", b"P5"):
        return read_pgm(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".pgm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"):
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")
    return _read_pil(path)


def quantize8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(x: np.ndarray, path) -> None:
    """Clamp to [0, 1], quantise to 8 bits and write PNG or PGM by suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        write_pgm(path, x)
    elif suffix == ".png":
        PILImage.fromarray(quantize8(x), mode="L").save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported output format {suffix!r}")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_field(path, array, header: dict | None = None) -> None:
    """Write ``array`` as raw little-endian float64 plus a ``<path>.json`` sidecar.

    Scalars are stored as 1x1 fields. ``header`` may carry extra keys such as
    ``kind`` and free-form ``notes``; ``n1``/``n2`` are always set from the array.
    """
    arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
    if arr.ndim != 2:
        raise ValueError("fields must be 2-D")
    meta = {"kind": "field", "notes": ""}
    meta.update(header or {})
    meta.update({"n1": int(arr.shape[0]), "n2": int(arr.shape[1]), "dtype": "<f8", "order": "row-major"})
    path = Path(path)
    arr.astype("<f8").tofile(path)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_field(path):
    """Inverse of :func:`save_field`; returns ``(array, header)``."""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise FieldFormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
        n1, n2 = int(meta["n1"]), int(meta["n2"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FieldFormatError(f"{side}: invalid sidecar") from exc
    size = os.path.getsize(path)
    if n1 <= 0 or n2 <= 0 or n1 * n2 * 8 != size:
        raise FieldFormatError(f"{path}: raster holds {size} bytes, header expects {n1}x{n2} float64")
    arr = np.fromfile(path, dtype="<f8").reshape(n1, n2).astype(np.float64)
    return arr, meta
