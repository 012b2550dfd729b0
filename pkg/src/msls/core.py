"""Image and kernel primitives shared by every stage of the deblurring pipeline.

Images are 2D ``float64`` arrays with intensities in [0, 1] (color images are
``(H, W, C)``). Kernels are small odd-sized nonnegative arrays summing to one,
indexed so that the array center is the zero offset.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

BOUNDARIES = ("replicate", "periodic")


class KernelError(ValueError):
    pass


# --------------------------------------------------------------------------
# kernels


def delta_kernel(size=1):
    if size % 2 == 0:
        raise KernelError("kernel size must be odd")
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def box_kernel(size):
    return np.full((size, size), 1.0 / (size * size))


def gaussian_kernel(size, sigma):
    """Sampled isotropic Gaussian, normalized to sum 1."""
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def random_motion_kernel(size, rng=None, n_steps=None, smooth=0.6):
    """Camera-shake-like kernel: a smoothed 2D random walk rasterized onto an
    odd ``size`` grid and centered by its center of mass.

    The walk is rescaled so its extent fills most of the support, which is
    what makes the support size meaningful for multi-scale tests.
    """
    if size % 2 == 0 or size < 3:
        raise KernelError("kernel size must be odd and >= 3")
    rng = np.random.default_rng(rng)
    n_steps = n_steps or 4 * size
    # momentum random walk
    vel = rng.normal(size=2)
    vel /= np.linalg.norm(vel) + 1e-12
    pts = np.zeros((n_steps, 2))
    for t in range(1, n_steps):
        vel = 0.85 * vel + 0.5 * rng.normal(size=2)
        vel /= np.linalg.norm(vel) + 1e-12
        pts[t] = pts[t - 1] + vel
    pts -= pts.mean(axis=0)
    extent = np.abs(pts).max()
    half = (size - 1) / 2.0 - 1.5
    pts *= half / max(extent, 1e-9)
    # bilinear splat, with exposure time varying along the path
    speed = rng.uniform(0.5, 1.5, size=n_steps)
    k = np.zeros((size, size))
    c = size // 2
    for (py, px), wgt in zip(pts, speed):
        y, x = py + c, px + c
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        fy, fx = y - y0, x - x0
        for dy, dx, a in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                          (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < size and 0 <= xx < size:
                k[yy, xx] += wgt * a
    if smooth:
        k = ndimage.gaussian_filter(k, smooth, mode="constant")
    k = center_kernel(k)
    return k / k.sum()


def check_kernel(k, atol=1e-9):
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise KernelError("kernel must be a square 2D array")
    if k.shape[0] % 2 == 0:
        raise KernelError("kernel size must be odd")
    if not np.all(np.isfinite(k)):
        raise KernelError("kernel has non-finite weights")
    if np.any(k < 0):
        raise KernelError("kernel has negative weights")
    if abs(k.sum() - 1.0) > atol:
        raise KernelError(f"kernel sums to {k.sum():.12g}, expected 1")
    return k


def normalize_kernel(k):
    k = np.clip(np.asarray(k, dtype=float), 0, None)
    s = k.sum()
    if s <= 0:
        raise KernelError("empty kernel estimate")
    return k / s


def center_of_mass(k):
    tot = k.sum()
    yy, xx = np.indices(k.shape)
    return (yy * k).sum() / tot, (xx * k).sum() / tot


def center_kernel(k):
    """Integer-shift ``k`` so its center of mass lands on the array center.

    Mass shifted past the border is dropped; callers renormalize.
    """
    if k.sum() <= 0:
        return k
    cy, cx = center_of_mass(k)
    c = k.shape[0] // 2
    sy, sx = int(round(c - cy)), int(round(c - cx))
    if sy == 0 and sx == 0:
        return k
    return ndimage.shift(k, (sy, sx), order=0, mode="constant", cval=0.0)


def pad_kernel(k, size):
    """Zero-pad (or center-crop) an odd kernel to ``size x size``."""
    n = k.shape[0]
    if n == size:
        return k.copy()
    if n > size:
        o = (n - size) // 2
        return k[o:o + size, o:o + size].copy()
    out = np.zeros((size, size))
    o = (size - n) // 2
    out[o:o + n, o:o + n] = k
    return out


# --------------------------------------------------------------------------
# FFT helpers


def psf2otf(k, shape):
    """Transfer function of ``k`` for circular convolution on ``shape``."""
    pad = np.zeros(shape)
    kh, kw = k.shape
    pad[:kh, :kw] = k
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return sfft.fft2(pad)


def otf2psf(otf_or_field, size, center=(0, 0)):
    """Crop a ``size x size`` window of a circular field around ``center``."""
    field = np.asarray(otf_or_field)
    h = size // 2
    cy, cx = center
    rows = (np.arange(-h, h + 1) + cy) % field.shape[0]
    cols = (np.arange(-h, h + 1) + cx) % field.shape[1]
    return field[np.ix_(rows, cols)]


def fft_convolve(img, k):
    """Circular convolution through the FFT."""
    return np.real(sfft.ifft2(sfft.fft2(img) * psf2otf(k, img.shape)))


def edge_taper(img, width, psf=None):
    """Blend the border band of ``img`` with a circularly blurred copy so the
    image becomes approximately periodic (suppresses FFT wraparound ringing).

    ``psf`` defaults to a Gaussian with the band width as its support.
    """
    width = int(width)
    h, w = img.shape
    if width <= 0:
        return img.copy()
    width = min(width, h // 2, w // 2)
    if width <= 0:
        return img.copy()
    if psf is None:
        size = 2 * (width // 2) + 1
        psf = gaussian_kernel(size, max(size / 4.0, 0.5))
    blurred = fft_convolve(img, psf)

    def ramp(n):
        a = np.ones(n)
        t = (np.arange(width) + 0.5) / width
        r = np.sin(0.5 * np.pi * t) ** 2
        a[:width] = r
        a[n - width:] = r[::-1]
        return a

    alpha = np.outer(ramp(h), ramp(w))
    return alpha * img + (1.0 - alpha) * blurred


# --------------------------------------------------------------------------
# convolution and gradients


def convolve2d(img, k, boundary="replicate"):
    """Blur ``img`` with kernel ``k``.

    ``replicate`` convolves spatially with edge replication. ``periodic``
    edge-tapers by one kernel width and multiplies spectra.
    """
    img = np.asarray(img, dtype=float)
    k = np.asarray(k, dtype=float)
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary policy {boundary!r}")
    if k.shape[0] > img.shape[0] or k.shape[1] > img.shape[1]:
        raise KernelError("kernel exceeds image support")
    if img.ndim == 3:
        return np.stack([convolve2d(img[..., c], k, boundary)
                         for c in range(img.shape[2])], axis=-1)
    if boundary == "replicate":
        return ndimage.convolve(img, k, mode="nearest")
    return fft_convolve(edge_taper(img, k.shape[0], k), k)


ORDER1 = ("x", "y")
ORDER2 = ("x", "y", "xx", "yy", "xy")


def _dx(a, periodic):
    if periodic:
        return np.roll(a, -1, axis=1) - a
    d = np.zeros_like(a)
    d[:, :-1] = a[:, 1:] - a[:, :-1]
    return d


def _dy(a, periodic):
    if periodic:
        return np.roll(a, -1, axis=0) - a
    d = np.zeros_like(a)
    d[:-1, :] = a[1:, :] - a[:-1, :]
    return d


def gradient(img, order=1, boundary="replicate"):
    """Forward-difference derivative field.

    Returns a dict keyed by direction: ``x``, ``y`` for order 1 and
    additionally ``xx``, ``yy``, ``xy`` for order 2 (compositions of the
    first-order operators). ``replicate`` zeroes the last difference,
    ``periodic`` wraps around.
    """
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise ValueError("empty image")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary policy {boundary!r}")
    p = boundary == "periodic"
    gx, gy = _dx(img, p), _dy(img, p)
    out = {"x": gx, "y": gy}
    if order == 2:
        out["xx"] = _dx(gx, p)
        out["yy"] = _dy(gy, p)
        out["xy"] = _dy(gx, p)
    return out


def derivative_otfs(shape, order=1):
    """Transfer functions of the periodic forward differences, keyed like
    :func:`gradient`."""
    dx = np.zeros(shape)
    dx[0, 0], dx[0, -1] = -1.0, 1.0
    dy = np.zeros(shape)
    dy[0, 0], dy[-1, 0] = -1.0, 1.0
    fx, fy = sfft.fft2(dx), sfft.fft2(dy)
    out = {"x": fx, "y": fy}
    if order == 2:
        out["xx"] = fx * fx
        out["yy"] = fy * fy
        out["xy"] = fx * fy
    return out


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticBlurSpec:
    kernel: np.ndarray
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def synth_blur(x, spec):
    """``k * x + n`` with replicate borders and seeded Gaussian noise."""
    b = convolve2d(x, spec.kernel, "replicate")
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        b = b + rng.normal(0.0, spec.noise_sigma, size=b.shape)
    return b


def to_luminance(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------
# configuration


@dataclass
class DeblurConfig:
    """Parameters of the blind deblurring pipeline."""

    kernel_size: int = 27
    lambda1: float = 5.0
    lambda2: float = 0.05
    lambda3: float = 5.0
    lambda4: float = 0.05
    mu: float = 0.01
    beta: float = math.log2(3)
    max_iteration: int = 3
    patch_size: int = 5
    patch_overlap_fraction: float = 0.5
    search_window: int = 10
    kernel_iterations: int = 4
    admm_rho: float = 1.0
    admm_iterations: int = 30
    admm_tol: float = 1e-4
    kernel_floor: float = 0.05
    kernel_component_fraction: float = 0.10
    guided_radius: int = 4
    guided_eps: float = 1e-4
    min_level_size: int = 4
    lambda_ref: float | None = 5.0

    def __post_init__(self):
        self.validate()

    @property
    def patch_stride(self):
        return max(1, int(self.patch_size * (1.0 - self.patch_overlap_fraction)))

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "mu",
                     "admm_rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.beta > 1:
            raise ValueError("beta must be > 1")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ValueError("patch_size must be odd")
        if self.search_window < self.patch_size:
            raise ValueError("search_window must be >= patch_size")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if not 0 <= self.patch_overlap_fraction < 1:
            raise ValueError("patch_overlap_fraction must be in [0, 1)")
        if self.lambda_ref is not None and not self.lambda_ref > 0:
            raise ValueError("lambda_ref must be > 0")
        if self.max_iteration < 0:
            raise ValueError("max_iteration must be >= 0")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
