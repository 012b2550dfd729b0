"""Blur kernel estimation with a sparse error-compensation layer.

Given a reconstructed sharp image ``x_hat`` and the blurry image ``b``, the
kernel is fitted in the gradient domain,

    min_{k, v}  1/2 sum_d ||k * D_d x_hat + v_d - D_d b||^2
                + lam_k ||k||^2 + lam_v sum_d ||v_d||_1,

where ``v`` absorbs detail missing from ``x_hat`` (it stands in for the
blurred gradients of a compensatory image layer). ``k`` has a closed form in
the Fourier domain and ``v`` is a soft-threshold, so the two are alternated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .core import (KernelError, ORDER1, ORDER2, edge_taper, gradient,
                   otf2psf)


class KernelSolveError(RuntimeError):
    pass


def soft_threshold(z, lam):
    """Proximal map of ``lam * |.|``: ``sign(z) * max(|z| - lam, 0)``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be >= 0")
    z = np.asarray(z, dtype=float)
    out = np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
    return out if out.ndim else float(out)


def _spectra(fields, keys):
    return {d: sfft.fft2(fields[d]) for d in keys}


def kernel_field(grad_xhat, grad_b, v, lam, keys=None):
    """Unconstrained minimizer over image-sized kernels (circular model).

    Returns the real field with the zero offset at ``[0, 0]``.
    """
    keys = keys or list(grad_xhat)
    fx = _spectra(grad_xhat, keys)
    fb = _spectra(grad_b, keys)
    fv = _spectra(v, keys) if v is not None else None
    return _kernel_field_from_spectra(fx, fb, fv, lam, keys)


def _kernel_field_from_spectra(fx, fb, fv, lam, keys):
    num = 0.0
    den = 0.0
    for d in keys:
        cx = np.conj(fx[d])
        r = fb[d] if fv is None else fb[d] - fv[d]
        num = num + cx * r
        den = den + (cx * fx[d]).real
    if not np.any(den > 0):
        raise KernelSolveError("degenerate data term")
    field_ = np.real(sfft.ifft2(num / (den + 2.0 * lam)))
    if not np.all(np.isfinite(field_)):
        raise KernelSolveError("kernel solve diverged")
    return field_


def peak_energy_center(field_, size):
    """Circular position maximizing the positive mass in a ``size`` window."""
    pos = np.clip(field_, 0.0, None)
    box = np.zeros(field_.shape)
    h = size // 2
    idx_r = np.arange(-h, h + 1) % field_.shape[0]
    idx_c = np.arange(-h, h + 1) % field_.shape[1]
    box[np.ix_(idx_r, idx_c)] = 1.0
    energy = np.real(sfft.ifft2(sfft.fft2(pos) * np.conj(sfft.fft2(box))))
    # prefer the origin on ties / flat fields
    energy[0, 0] += 1e-12 * abs(energy).max()
    cy, cx = np.unravel_index(np.argmax(energy), energy.shape)
    return int(cy), int(cx)


def postprocess_kernel(raw, kernel_size, floor=0.05, component_fraction=0.10):
    """Turn a raw least-squares field into a valid blur kernel.

    Clamps negatives, drops entries below ``floor * max``, keeps the largest
    8-connected component plus any component holding at least
    ``component_fraction`` of its mass, recenters on the center of mass and
    normalizes to sum 1.
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise KernelError("kernel estimate has non-finite values")
    k = np.clip(raw, 0.0, None)
    if k.max() <= 0:
        raise KernelError("empty kernel estimate")
    k[k < floor * k.max()] = 0.0
    labels, n = ndimage.label(k > 0, structure=np.ones((3, 3)))
    if n > 1:
        mass = ndimage.sum(k, labels, index=np.arange(1, n + 1))
        keep = np.flatnonzero(mass >= component_fraction * mass.max()) + 1
        k[~np.isin(labels, keep)] = 0.0
    # recenter on the (rounded) center of mass, cropping to kernel_size
    tot = k.sum()
    yy, xx = np.indices(k.shape)
    cy = int(round((yy * k).sum() / tot))
    cx = int(round((xx * k).sum() / tot))
    h = kernel_size // 2
    out = np.zeros((kernel_size, kernel_size))
    y0, x0 = cy - h, cx - h
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + kernel_size, k.shape[0]), min(x0 + kernel_size, k.shape[1])
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = k[sy0:sy1, sx0:sx1]
    s = out.sum()
    if s <= 0:
        raise KernelError("empty kernel estimate")
    return out / s


def crop_kernel_field(field_, kernel_size, margin=None):
    """Window of the circular field around its peak-energy center, wide
    enough (``kernel_size + 2 * margin``) that recentering keeps the mass."""
    margin = kernel_size // 2 if margin is None else margin
    size = min(kernel_size + 2 * margin, 2 * (min(field_.shape) // 2) - 1)
    size = max(size, 1)
    center = peak_energy_center(field_, kernel_size)
    return otf2psf(field_, size, center)


def solve_kernel_fft(grad_xhat, grad_b, v, lam, kernel_size, postprocess=True,
                     floor=0.05, component_fraction=0.10):
    """Closed-form kernel for fixed ``v``.

    ``k = F^-1( sum_d conj(X_d) (B_d - V_d) / (sum_d |X_d|^2 + 2 lam) )``
    evaluated over the image grid, cropped around its peak-energy center and
    post-processed into a ``kernel_size`` kernel (or returned raw-cropped
    when ``postprocess`` is false).
    """
    field_ = kernel_field(grad_xhat, grad_b, v, lam)
    crop = crop_kernel_field(field_, kernel_size)
    if not postprocess:
        return otf2psf(field_, kernel_size, peak_energy_center(field_, kernel_size))
    return postprocess_kernel(crop, kernel_size, floor, component_fraction)


@dataclass
class KernelEstimate:
    kernel: np.ndarray
    v: dict
    objective: list = field(default_factory=list)
    raw_field: np.ndarray | None = None


def kernel_objective(field_spec, fx, fb, v, lam_k, lam_v, keys):
    """Value of the convex (k, v) objective for an image-sized kernel given by
    its spectrum ``field_spec``."""
    total = 0.0
    for d in keys:
        kx = np.real(sfft.ifft2(field_spec * fx[d]))
        r = kx + v[d] - np.real(sfft.ifft2(fb[d]))
        total += 0.5 * float((r * r).sum()) + lam_v * float(np.abs(v[d]).sum())
    n = field_spec.size
    total += lam_k * float((np.abs(field_spec) ** 2).sum()) / n
    return total


def estimate_kernel(x_hat, b, kernel_size, lam_k=5.0, lam_v=0.05, order=1,
                    iterations=4, v0=None, taper=True, floor=0.05,
                    component_fraction=0.10, track_objective=False,
                    lam_ref=None):
    """Alternate the closed-form kernel solve and the soft-threshold update.

    The alternation runs on the image-sized kernel, so each step exactly
    minimizes the joint convex objective in one block and the objective never
    increases. The final field is then cropped and cleaned into a
    ``kernel_size`` kernel.

    With ``lam_ref`` set, ``lam_k`` is relative to the data: the weight used
    is ``lam_k * E / lam_ref`` where ``E = sum_d ||D_d x_hat||^2``, which
    makes the estimate invariant to image size and intensity scale.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    b = np.asarray(b, dtype=float)
    if x_hat.shape != b.shape:
        raise ValueError("x_hat and b must have the same shape")
    keys = ORDER1 if order == 1 else ORDER2
    if taper:
        width = max(kernel_size, 3)
        x_hat = edge_taper(x_hat, width)
        b = edge_taper(b, width)
    gx = gradient(x_hat, order, "periodic")
    gb = gradient(b, order, "periodic")
    fx = _spectra(gx, keys)
    fb = _spectra(gb, keys)
    den = sum((np.conj(fx[d]) * fx[d]).real for d in keys)
    if not np.any(den > 1e-20):
        raise KernelSolveError("degenerate data term")
    if lam_ref is not None:
        lam_k = lam_k * float(den.mean()) / lam_ref
    den = den + 2.0 * lam_k
    if v0 is not None and all(d in v0 and v0[d].shape == b.shape for d in keys):
        v = {d: v0[d].copy() for d in keys}
    else:
        v = {d: np.zeros_like(b) for d in keys}

    objective = []
    spec = None
    for _ in range(max(1, iterations)):
        num = 0.0
        for d in keys:
            num = num + np.conj(fx[d]) * (fb[d] - sfft.fft2(v[d]))
        spec = num / den
        if track_objective:
            objective.append(kernel_objective(spec, fx, fb, v, lam_k, lam_v, keys))
        for d in keys:
            z = gb[d] - np.real(sfft.ifft2(spec * fx[d]))
            v[d] = soft_threshold(z, lam_v)
        if track_objective:
            objective.append(kernel_objective(spec, fx, fb, v, lam_k, lam_v, keys))
    field_ = np.real(sfft.ifft2(spec))
    if not np.all(np.isfinite(field_)):
        raise KernelSolveError("kernel solve diverged")
    crop = crop_kernel_field(field_, kernel_size)
    k = postprocess_kernel(crop, kernel_size, floor, component_fraction)
    return KernelEstimate(k, v, objective, field_)
