"""Coarse-to-fine image pyramid and the kernel down-sampling law.

Down-sampling a blurry image by ``alpha`` shrinks the blur kernel support by
``alpha`` per axis (``k_alpha(u, v) = alpha**2 k(alpha u, alpha v)``), so deep
enough in the pyramid the kernel becomes a delta and the blurry image is a
low-resolution copy of the sharp one. The coarsest level is therefore used
as the first sharp prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleLevel:
    index: int
    shape: tuple
    kernel_size: int
    factor: float  # nominal down-sampling ratio relative to the finest level


@dataclass
class ScaleSchedule:
    levels: list = field(default_factory=list)  # coarsest -> finest
    beta: float = math.log2(3)
    n_levels: int = 0  # number of beta steps between coarsest and finest

    @property
    def finest(self):
        return self.levels[-1]

    def to_dict(self):
        return {
            "beta": self.beta,
            "n_levels": self.n_levels,
            "levels": [
                {"level": lv.index, "height": lv.shape[0], "width": lv.shape[1],
                 "kernel_size": lv.kernel_size, "factor": lv.factor}
                for lv in self.levels
            ],
        }


def _odd_ceil(x):
    n = max(1, math.ceil(x - 1e-9))
    return n if n % 2 else n + 1


def level_count(kernel_size, beta):
    """Smallest ``n`` with ``kernel_size / beta**n <= 1``."""
    if kernel_size <= 1:
        return 0
    n = math.ceil(math.log(kernel_size) / math.log(beta))
    # guard against log rounding either way
    while kernel_size / beta ** n > 1 + 1e-12:
        n += 1
    while n > 0 and kernel_size / beta ** (n - 1) <= 1:
        n -= 1
    return n


def downsampled_shape(shape, factor):
    return tuple(int(round(s / factor)) for s in shape)


def build_schedule(image_shape, kernel_size, beta=math.log2(3), min_size=4):
    """Plan the pyramid for an image of ``image_shape`` and kernel size ``h``.

    Level 0 is the coarsest image, where the kernel has collapsed to a delta;
    level ``n_levels`` is the input resolution. Shapes follow the chained
    level-to-level down-sampling that :func:`build_pyramid` performs.
    """
    h = int(kernel_size)
    if h < 1 or h % 2 == 0:
        raise ScheduleError("kernel size must be a positive odd integer")
    if not beta > 1:
        raise ScheduleError("beta must be > 1")
    shape = tuple(int(s) for s in image_shape[:2])
    n = level_count(h, beta)
    shapes = [shape]
    for _ in range(n):
        shapes.append(downsampled_shape(shapes[-1], beta))
    shapes.reverse()
    if min(shapes[0]) < min_size:
        raise ScheduleError(
            f"insufficient resolution for kernel size {h}: coarsest level "
            f"would be {shapes[0][0]}x{shapes[0][1]} (< {min_size} px)")
    levels = []
    for lv in range(n + 1):
        ks = 1 if lv == 0 else _odd_ceil(h / beta ** (n - lv))
        if lv == n:
            ks = h
        levels.append(ScaleLevel(lv, shapes[lv], ks, beta ** (n - lv)))
    return ScaleSchedule(levels=levels, beta=beta, n_levels=n)


def antialias_sigma(factor):
    return 0.8 * math.sqrt(factor * factor - 1.0)


def resample_bilinear(img, shape):
    """Sample ``img`` on a ``shape`` grid aligned by pixel centers."""
    h, w = img.shape
    oh, ow = shape
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def lowpass_downsample(img, factor, shape=None):
    """Gaussian anti-alias filter followed by bilinear sampling.

    The output has ``round(input / factor)`` rows and columns unless
    ``shape`` is given.
    """
    img = np.asarray(img, dtype=float)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out_shape = tuple(shape) if shape is not None else downsampled_shape(img.shape[:2], factor)
    if min(out_shape) < 2:
        raise ValueError(f"degenerate output size {out_shape}")
    if img.ndim == 3:
        return np.stack([lowpass_downsample(img[..., c], factor, out_shape)
                         for c in range(img.shape[2])], axis=-1)
    if factor == 1 and out_shape == img.shape:
        return img.copy()
    sigma = antialias_sigma(factor)
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img
    return resample_bilinear(smooth, out_shape)


def build_pyramid(img, schedule):
    """Chained down-sampling: finest -> coarser, one ``beta`` step at a time."""
    out = [np.asarray(img, dtype=float)]
    for lv in reversed(schedule.levels[:-1]):
        out.append(lowpass_downsample(out[-1], schedule.beta, lv.shape))
    out.reverse()
    return out


def _cell_overlap(n_in, alpha, n_out):
    """Overlap lengths between input pixels (unit cells centered on integer
    offsets) and output cells of width ``alpha``."""
    c_in = n_in // 2
    c_out = n_out // 2
    lo_in = np.arange(n_in) - c_in - 0.5
    hi_in = lo_in + 1.0
    lo_out = (np.arange(n_out) - c_out - 0.5) * alpha
    hi_out = lo_out + alpha
    ov = np.minimum(hi_out[:, None], hi_in[None, :]) - np.maximum(lo_out[:, None], lo_in[None, :])
    return np.clip(ov, 0.0, None)


def downsample_kernel(k, alpha, method="area"):
    """Discrete version of ``k_alpha(u, v) = alpha^2 k(alpha u, alpha v)``.

    ``method="area"`` integrates ``k`` (piecewise constant over unit pixels)
    over ``alpha x alpha`` cells centered on the kernel center. It conserves
    mass, so the center weight can only grow with ``alpha``.
    ``method="sample"`` evaluates the scaled kernel at the output grid points
    with bilinear interpolation. Either result is renormalized to sum 1.
    """
    k = np.asarray(k, dtype=float)
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if method not in ("area", "sample"):
        raise ValueError(f"unknown method {method!r}")
    n = k.shape[0]
    half = max(math.ceil(n / (2.0 * alpha) - 0.5 - 1e-12), 0)
    n_out = 2 * half + 1
    if method == "area":
        m = _cell_overlap(n, alpha, n_out)
        out = m @ k @ m.T
    else:
        pos = (np.arange(n_out) - half) * alpha + n // 2
        yy, xx = np.meshgrid(pos, pos, indexing="ij")
        out = alpha ** 2 * ndimage.map_coordinates(k, [yy, xx], order=1,
                                                   mode="constant", cval=0.0)
    out = np.clip(out, 0.0, None)
    s = out.sum()
    if s <= 0:
        out = np.zeros((n_out, n_out))
        out[half, half] = 1.0
        return out
    return out / s


def delta_distance(k):
    """L1 distance between ``k`` and a delta at its center."""
    k = np.asarray(k, dtype=float)
    c = k[k.shape[0] // 2, k.shape[1] // 2]
    return float(np.abs(k).sum() - abs(c) + abs(c - 1.0))
