"""PNG/PGM image I/O and kernel serialization."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .core import normalize_kernel, to_luminance

FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


class ImageFormatError(ValueError):
    pass


def _format_for(path, fmt=None):
    if fmt:
        f = fmt.upper()
        return "PPM" if f in ("PGM", "PPM") else f
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in FORMATS:
        raise ImageFormatError(f"unsupported image extension {ext!r}")
    return FORMATS[ext]


def load_image(path, mode="luma"):
    """Read an 8-bit PNG/PGM/PPM into floats in [0, 1].

    ``mode="luma"`` collapses color to luminance; ``mode="rgb"`` keeps the
    channels (grayscale files stay 2D).
    """
    if mode not in ("luma", "rgb"):
        raise ValueError("mode must be 'luma' or 'rgb'")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageFormatError(f"unsupported bit depth (mode {im.mode})")
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            if im.mode in ("1", "LA"):
                im = im.convert("L")
            if im.mode == "RGBA":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise ImageFormatError(f"unsupported image mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3 and mode == "luma":
        arr = to_luminance(arr)
    return arr


def save_image(path, img, fmt=None):
    """Write ``img`` (clipped to [0, 1]) as 8-bit PNG or binary PGM/PPM."""
    fmt = _format_for(path, fmt)
    a = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("image has non-finite values")
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[..., 0]
    Image.fromarray(q).save(path, format=fmt)


def save_kernel(path, k):
    """Text (``.txt``) or PGM kernel file. Text carries an ``h w`` header."""
    k = np.asarray(k, dtype=float)
    if str(path).lower().endswith((".pgm", ".png")):
        save_image(path, k / k.max() if k.max() > 0 else k)
        return
    with open(path, "w") as fh:
        fh.write(f"{k.shape[0]} {k.shape[1]}\n")
        for row in k:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_kernel(path):
    if str(path).lower().endswith((".pgm", ".png")):
        return normalize_kernel(load_image(path))
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ImageFormatError(f"empty kernel file {path}")
    try:
        h, w = (int(t) for t in lines[0].split())
        rows = [[float(t) for t in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise ImageFormatError(f"malformed kernel file {path}: {exc}") from exc
    if len(rows) != h or any(len(r) != w for r in rows):
        raise ImageFormatError(f"kernel file {path} does not match header {h}x{w}")
    return np.array(rows)
