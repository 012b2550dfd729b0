"""Spatially varying blur as a weighted sum of projective warps.

The pose set is factored as a small list of base warps (in-plane rotations
by default) composed with an integer translation grid::

    A_k x = sum_j sum_t k[j, t] T_t H_j x = sum_j K_j (*) (H_j x)

so each base warp contributes one ordinary convolution with its translation
weights ``K_j``. Warps are bilinear with replicate borders and stored as
sparse matrices, which gives exact adjoints. Kernel weights are solved with a
matrix-free Krylov method, the image with ADMM whose x-update is the same
Krylov solve (the convolution theorem no longer applies).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import sparse

from .core import (DeblurConfig, ORDER1, ORDER2, delta_kernel, gradient,
                   to_luminance)
from .kernelest import KernelEstimate, soft_threshold
from .patchmatch import reconstruct_sharp
from .pipeline import DeblurResult, PipelineError, TraceEntry, guided_filter
from .pyramid import build_pyramid, build_schedule, lowpass_downsample

BORDERS = ("replicate", "wrap")


class NonUniformSolveError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# poses


def rotation_homography(theta_deg, shape):
    """In-plane rotation about the image center, in ``(x, y, 1)`` pixel
    coordinates. It maps output coordinates to source coordinates."""
    t = math.radians(theta_deg)
    cy, cx = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    to_c = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    return back @ rot @ to_c


def translation_homography(ty, tx):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


@dataclass
class PoseGridConfig:
    """Pose discretization: base warps times a square translation grid.

    ``homographies`` (a list of 3x3 matrices) overrides the rotation grid.
    """

    rotation_extent: float = 2.0
    rotation_steps: int = 5
    homographies: list | None = None
    border: str = "replicate"
    cg_tol: float = 1e-5
    cg_iterations: int = 50

    def __post_init__(self):
        if self.rotation_steps < 1:
            raise ValueError("rotation_steps must be >= 1")
        if self.rotation_extent < 0:
            raise ValueError("rotation_extent must be >= 0")
        if self.border not in BORDERS:
            raise ValueError(f"border must be one of {BORDERS}")
        if self.cg_iterations < 1 or self.cg_tol <= 0:
            raise ValueError("cg_iterations must be >= 1 and cg_tol > 0")

    def angles(self):
        if self.rotation_steps == 1:
            return np.zeros(1)
        a = np.linspace(-self.rotation_extent, self.rotation_extent,
                        self.rotation_steps)
        a[np.argmin(np.abs(a))] = 0.0
        return a

    def to_dict(self):
        d = dict(self.__dict__)
        if d["homographies"] is not None:
            d["homographies"] = [np.asarray(h, float).tolist()
                                 for h in d["homographies"]]
        return d

    @classmethod
    def from_dict(cls, d):
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pose grid keys: {sorted(unknown)}")
        return cls(**d)


class PoseBasis:
    """Ordered pose set: base warps ``H_j`` (major) times integer
    translations ``(ty, tx)`` in ``[-radius, radius]^2`` (raster order).

    Pose ``i`` is the homography ``T_t H_j`` with ``i = j * n_t + t``.
    """

    def __init__(self, shape, base, radius, border="replicate", labels=None):
        if border not in BORDERS:
            raise ValueError(f"border must be one of {BORDERS}")
        base = np.asarray(base, dtype=float).reshape(-1, 3, 3)
        if radius < 0:
            raise ValueError("radius must be >= 0")
        eye = [j for j in range(len(base)) if np.allclose(base[j], np.eye(3))]
        if not eye:
            raise ValueError("pose basis must contain the identity")
        self.shape = tuple(int(s) for s in shape[:2])
        self.base = base
        self.radius = int(radius)
        self.border = border
        self.identity_index = eye[0]
        self.labels = list(labels) if labels is not None else list(range(len(base)))
        self._warps = [None if np.allclose(h, np.eye(3))
                       else warp_matrix(h, self.shape, border) for h in base]

    @classmethod
    def from_config(cls, shape, kernel_size, pcfg=None):
        pcfg = pcfg or PoseGridConfig()
        if pcfg.homographies is not None:
            base = [np.asarray(h, float) for h in pcfg.homographies]
            labels = None
        else:
            labels = [float(a) for a in pcfg.angles()]
            base = [rotation_homography(a, shape) for a in labels]
        return cls(shape, base, kernel_size // 2, pcfg.border, labels)

    @classmethod
    def translations(cls, shape, kernel_size, border="replicate"):
        return cls(shape, [np.eye(3)], kernel_size // 2, border)

    @property
    def kernel_size(self):
        return 2 * self.radius + 1

    @property
    def n_base(self):
        return len(self.base)

    def __len__(self):
        return self.n_base * self.kernel_size ** 2

    @property
    def poses(self):
        out = []
        r = self.radius
        for h in self.base:
            for ty in range(-r, r + 1):
                for tx in range(-r, r + 1):
                    # source coordinates shift by -t when the image moves by +t
                    out.append(h @ translation_homography(-ty, -tx))
        return out

    def warp(self, x, j):
        w = self._warps[j]
        if w is None:
            return x
        return (w @ x.ravel()).reshape(x.shape)

    def warp_adjoint(self, y, j):
        w = self._warps[j]
        if w is None:
            return y
        return (w.T @ y.ravel()).reshape(y.shape)

    def rescaled(self, shape, kernel_size):
        """Same base warps at another resolution: rotations keep their angle,
        translations follow the level's kernel size."""
        f = np.diag([shape[1] / self.shape[1], shape[0] / self.shape[0], 1.0])
        fi = np.linalg.inv(f)
        base = []
        for h in self.base:
            g = f @ h @ fi
            base.append(g / g[2, 2])
        return PoseBasis(shape, base, kernel_size // 2, self.border, self.labels)

    def to_dict(self):
        return {"shape": list(self.shape), "radius": self.radius,
                "border": self.border, "labels": self.labels,
                "base": [h.tolist() for h in self.base]}


def warp_matrix(h, shape, border="replicate"):
    """Sparse bilinear warp: output pixel ``(y, x)`` samples the source at
    ``h @ (x, y, 1)``. Replicate borders clamp coordinates; wrap borders
    take them modulo the image size."""
    ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx]
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(ny * nx)]).astype(float)
    src = h @ pts
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    if border == "replicate":
        sx = np.clip(sx, 0, nx - 1)
        sy = np.clip(sy, 0, ny - 1)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    rows = np.arange(ny * nx)
    r_all, c_all, v_all = [], [], []
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        if border == "replicate":
            yi = np.minimum(y0 + dy, ny - 1)
            xi = np.minimum(x0 + dx, nx - 1)
        else:
            yi = (y0 + dy) % ny
            xi = (x0 + dx) % nx
        keep = wgt != 0
        r_all.append(rows[keep])
        c_all.append((yi * nx + xi)[keep])
        v_all.append(wgt[keep])
    m = sparse.csr_matrix((np.concatenate(v_all),
                           (np.concatenate(r_all), np.concatenate(c_all))),
                          shape=(ny * nx, ny * nx))
    m.sum_duplicates()
    return m


# --------------------------------------------------------------------------
# padded convolution with exact adjoints


def _pad_index(shape, r, border):
    idx = np.arange(shape[0] * shape[1]).reshape(shape)
    return np.pad(idx, r, mode="edge" if border == "replicate" else "wrap")


class _PaddedConv:
    """``out = valid(pad(y) * K)`` for ``(2r+1)^2`` kernels, via FFT on the
    padded grid (the valid window never wraps)."""

    def __init__(self, shape, r, border):
        self.shape = tuple(shape)
        self.r = r
        self.full = (shape[0] + 2 * r, shape[1] + 2 * r)
        self.index = _pad_index(shape, r, border)

    def pad(self, y):
        return y.ravel()[self.index]

    def pad_adjoint(self, z):
        n = self.shape[0] * self.shape[1]
        return np.bincount(self.index.ravel(), weights=z.ravel(),
                           minlength=n).reshape(self.shape)

    def spectrum(self, y):
        return sfft.rfft2(self.pad(y))

    def kernel_spectrum(self, k):
        kp = np.zeros(self.full)
        kp[:k.shape[0], :k.shape[1]] = k
        return sfft.rfft2(kp)

    def crop(self, full):
        r2 = 2 * self.r
        return full[r2:r2 + self.shape[0], r2:r2 + self.shape[1]]

    def embed(self, u):
        z = np.zeros(self.full)
        r2 = 2 * self.r
        z[r2:r2 + self.shape[0], r2:r2 + self.shape[1]] = u
        return z

    def apply(self, fy, fk):
        return self.crop(sfft.irfft2(fy * fk, s=self.full))

    def kernel_adjoint(self, fy, u):
        """Gradient of ``<apply(y, K), u>`` with respect to ``K``."""
        c = sfft.irfft2(sfft.rfft2(self.embed(u)) * np.conj(fy), s=self.full)
        n = 2 * self.r + 1
        return c[:n, :n]

    def image_adjoint(self, fk, u):
        """Gradient of ``<apply(y, K), u>`` with respect to ``y``."""
        z = sfft.irfft2(sfft.rfft2(self.embed(u)) * np.conj(fk), s=self.full)
        return self.pad_adjoint(z)


# --------------------------------------------------------------------------
# weights


@dataclass
class PoseWeights:
    """Nonnegative weight per pose, stored as ``(n_base, h, h)`` translation
    fields (one per base warp)."""

    k: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        if self.k.ndim != 3 or self.k.shape[1] != self.k.shape[2] \
                or self.k.shape[1] % 2 == 0:
            raise ValueError("weights must have shape (n_base, h, h), h odd")

    @classmethod
    def identity(cls, basis):
        k = np.zeros((basis.n_base, basis.kernel_size, basis.kernel_size))
        k[basis.identity_index, basis.radius, basis.radius] = 1.0
        return cls(k)

    @classmethod
    def from_kernel(cls, kernel, basis):
        """Weights that put ``kernel`` on the identity warp."""
        kernel = np.asarray(kernel, float)
        if kernel.shape != (basis.kernel_size,) * 2:
            raise ValueError("kernel size does not match the pose basis")
        k = np.zeros((basis.n_base,) + kernel.shape)
        k[basis.identity_index] = kernel
        return cls(k)

    @property
    def flat(self):
        return self.k.ravel()

    def __len__(self):
        return self.k.size

    def marginal(self):
        """Translation weights summed over base warps."""
        return self.k.sum(axis=0)

    def check(self, basis):
        if self.k.shape != (basis.n_base, basis.kernel_size, basis.kernel_size):
            raise ValueError("weights do not match the pose basis")
        if np.any(self.k < 0) or not np.all(np.isfinite(self.k)):
            raise ValueError("weights must be finite and nonnegative")
        if self.k.sum() <= 0:
            raise ValueError("weights must not all be zero")

    def to_json(self, path, basis=None):
        d = {"weights": self.k.tolist()}
        if basis is not None:
            d["basis"] = basis.to_dict()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(np.array(json.load(fh)["weights"], dtype=float))


def normalize_weights(w):
    k = np.clip(np.asarray(w, float), 0.0, None)
    s = k.sum()
    if not s > 0:
        raise NonUniformSolveError("empty pose weights")
    return k / s


# --------------------------------------------------------------------------
# forward model


class PoseOperator:
    """``A_k`` for fixed weights, with its adjoint."""

    def __init__(self, basis, weights):
        weights = weights if isinstance(weights, PoseWeights) else PoseWeights(weights)
        if weights.k.shape != (basis.n_base, basis.kernel_size, basis.kernel_size):
            raise ValueError("weights do not match the pose basis")
        self.basis = basis
        self.conv = _PaddedConv(basis.shape, basis.radius, basis.border)
        self.active = [j for j in range(basis.n_base) if np.any(weights.k[j])]
        self.fk = {j: self.conv.kernel_spectrum(weights.k[j]) for j in self.active}

    def __call__(self, x):
        out = np.zeros(self.basis.shape)
        for j in self.active:
            y = self.basis.warp(x, j)
            out += self.conv.apply(self.conv.spectrum(y), self.fk[j])
        return out

    def adjoint(self, u):
        out = np.zeros(self.basis.shape)
        for j in self.active:
            out += self.basis.warp_adjoint(self.conv.image_adjoint(self.fk[j], u), j)
        return out


def apply_pose_blur(x, w, basis):
    """``sum_i w_i warp(x, H_i)``; color images are blurred per channel."""
    x = np.asarray(x, dtype=float)
    w = w if isinstance(w, PoseWeights) else PoseWeights(w)
    if np.any(w.k < 0):
        raise ValueError("weights must be nonnegative")
    if x.ndim == 3:
        return np.stack([apply_pose_blur(x[..., c], w, basis)
                         for c in range(x.shape[2])], axis=-1)
    if x.shape != basis.shape:
        raise ValueError("image shape does not match the pose basis")
    return PoseOperator(basis, w)(x)


class GradientPoseOperator:
    """``B_g w = sum_j K_j (*) H_j g`` for each derivative member ``g``, as a
    linear map of the weights."""

    def __init__(self, basis, grads, keys):
        self.basis = basis
        self.keys = keys
        self.conv = _PaddedConv(basis.shape, basis.radius, basis.border)
        self.fy = {(d, j): self.conv.spectrum(basis.warp(grads[d], j))
                   for d in keys for j in range(basis.n_base)}
        self.wshape = (basis.n_base, basis.kernel_size, basis.kernel_size)

    def __call__(self, w):
        w = w.reshape(self.wshape)
        fk = [self.conv.kernel_spectrum(w[j]) for j in range(self.basis.n_base)]
        out = {}
        for d in self.keys:
            acc = np.zeros(self.basis.shape)
            for j in range(self.basis.n_base):
                acc += self.conv.apply(self.fy[d, j], fk[j])
            out[d] = acc
        return out

    def adjoint(self, res):
        g = np.zeros(self.wshape)
        for d in self.keys:
            fu = sfft.rfft2(self.conv.embed(res[d]))
            for j in range(self.basis.n_base):
                c = sfft.irfft2(fu * np.conj(self.fy[d, j]), s=self.conv.full)
                g[j] += c[:self.wshape[1], :self.wshape[2]]
        return g

    def normal(self, w, lam):
        return self.adjoint(self(w)).ravel() + 2.0 * lam * w


# --------------------------------------------------------------------------
# Krylov solver


@dataclass
class KrylovInfo:
    residuals: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def conjugate_residual(apply_a, rhs, x0=None, tol=1e-5, maxiter=50,
                       stall=5):
    """Solve ``A x = rhs`` for symmetric positive definite ``A``.

    Conjugate residuals minimize ``||rhs - A x||`` over the Krylov space, so
    the residual norm never increases (plain CG only guarantees this in the
    energy norm). Stops at relative residual ``tol`` or ``maxiter``; a
    residual that does not decrease for ``stall`` consecutive steps raises.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply_a(x) if x0 is not None else rhs.copy()
    bnorm = np.linalg.norm(rhs)
    info = KrylovInfo()
    if bnorm == 0:
        info.converged = True
        return np.zeros_like(rhs), info
    rnorm = np.linalg.norm(r)
    info.residuals.append(rnorm / bnorm)
    if rnorm / bnorm <= tol:
        info.converged = True
        return x, info
    ar = apply_a(r)
    p = r.copy()
    ap = ar.copy()
    rar = float(r @ ar)
    flat = 0
    for it in range(1, maxiter + 1):
        app = float(ap @ ap)
        if not np.isfinite(app) or app <= 0:
            raise NonUniformSolveError("non-uniform solve did not converge")
        alpha = rar / app
        x = x + alpha * p
        r = r - alpha * ap
        new = np.linalg.norm(r)
        if not np.isfinite(new):
            raise NonUniformSolveError("non-uniform solve did not converge")
        flat = flat + 1 if new >= rnorm * (1.0 - 1e-12) else 0
        rnorm = new
        info.residuals.append(rnorm / bnorm)
        info.iterations = it
        if rnorm / bnorm <= tol:
            info.converged = True
            break
        if flat >= stall:
            raise NonUniformSolveError("non-uniform solve did not converge")
        ar = apply_a(r)
        rar_new = float(r @ ar)
        beta = rar_new / rar
        rar = rar_new
        p = r + beta * p
        ap = ar + beta * ap
    return x, info


# --------------------------------------------------------------------------
# kernel estimation


def _gradients(img, order, border):
    return gradient(img, order, "replicate" if border == "replicate" else "periodic")


def estimate_nu_kernel(x_hat, b, basis, lam_k=5.0, lam_v=0.05, order=1,
                       iterations=4, v0=None, cg_tol=1e-5, cg_iterations=50,
                       lam_ref=None, w0=None, return_info=False):
    """Pose weights from ``(x_hat, b)`` with the sparse compensation field.

    Alternates a Krylov solve of ``(B^T B + 2 lam_k I) w = B^T (grad b - v)``
    with ``v = soft(grad b - B w, lam_v)``; the weights are then clamped to
    be nonnegative and renormalized. ``lam_ref`` makes ``lam_k`` relative to
    the gradient energy of ``x_hat`` as in the uniform solver.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    b = np.asarray(b, dtype=float)
    if x_hat.shape != b.shape or x_hat.shape != basis.shape:
        raise ValueError("x_hat, b and the pose basis must share a shape")
    keys = ORDER1 if order == 1 else ORDER2
    gx = _gradients(x_hat, order, basis.border)
    gb = _gradients(b, order, basis.border)
    energy = sum(float((gx[d] ** 2).sum()) for d in keys)
    if energy <= 1e-20:
        raise NonUniformSolveError("degenerate data term")
    if lam_ref is not None:
        lam_k = lam_k * energy / lam_ref
    op = GradientPoseOperator(basis, gx, keys)
    if v0 is not None and all(d in v0 and v0[d].shape == b.shape for d in keys):
        v = {d: v0[d].copy() for d in keys}
    else:
        v = {d: np.zeros_like(b) for d in keys}
    w = None if w0 is None else np.asarray(w0, float).ravel()
    infos = []
    for _ in range(max(1, iterations)):
        rhs = op.adjoint({d: gb[d] - v[d] for d in keys}).ravel()
        w, info = conjugate_residual(lambda q: op.normal(q, lam_k), rhs, w,
                                     cg_tol, cg_iterations)
        infos.append(info)
        bw = op(w)
        for d in keys:
            v[d] = soft_threshold(gb[d] - bw[d], lam_v)
    raw = w.reshape(op.wshape)
    weights = PoseWeights(normalize_weights(raw))
    est = KernelEstimate(weights.marginal(), v, [], raw)
    return (weights, est, infos) if return_info else (weights, est)


# --------------------------------------------------------------------------
# non-blind restoration


def _grad_pair(x, border):
    if border == "replicate":
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        gx[:, :-1] = x[:, 1:] - x[:, :-1]
        gy[:-1, :] = x[1:, :] - x[:-1, :]
    else:
        gx = np.roll(x, -1, axis=1) - x
        gy = np.roll(x, -1, axis=0) - x
    return gx, gy


def _grad_pair_adjoint(gx, gy, border):
    if border == "replicate":
        out = np.zeros_like(gx)
        out[:, :-1] -= gx[:, :-1]
        out[:, 1:] += gx[:, :-1]
        out[:-1, :] -= gy[:-1, :]
        out[1:, :] += gy[:-1, :]
        return out
    return (np.roll(gx, 1, axis=1) - gx) + (np.roll(gy, 1, axis=0) - gy)


def nu_tv_deblur(b, w, basis, mu=0.01, rho=1.0, iterations=30, tol=1e-4,
                 cg_tol=1e-5, cg_iterations=50, clip=True, return_info=False):
    """TV deconvolution under the pose blur ``A_w`` by ADMM.

    The x-update solves ``(A^T A + rho D^T D) x = A^T b + rho D^T (z - u)``
    with warm-started conjugate residuals; z and u follow the uniform solver.
    """
    b = np.asarray(b, dtype=float)
    w = w if isinstance(w, PoseWeights) else PoseWeights(w)
    if mu <= 0:
        raise ValueError("mu must be > 0")
    if b.ndim == 3:
        outs = [nu_tv_deblur(b[..., c], w, basis, mu, rho, iterations, tol,
                             cg_tol, cg_iterations, clip) for c in range(b.shape[2])]
        return np.stack(outs, axis=-1)
    w.check(basis)
    border = basis.border
    a = PoseOperator(basis, w)
    shape = b.shape

    def normal(q):
        q = q.reshape(shape)
        gx, gy = _grad_pair(q, border)
        out = a.adjoint(a(q)) + rho * _grad_pair_adjoint(gx, gy, border)
        return out.ravel()

    atb = a.adjoint(b)
    x = b.copy()
    zx, zy = _grad_pair(x, border)
    ux = np.zeros_like(x)
    uy = np.zeros_like(x)
    thresh = mu / rho
    residuals = []
    for it in range(1, iterations + 1):
        rhs = atb + rho * _grad_pair_adjoint(zx - ux, zy - uy, border)
        sol, _ = conjugate_residual(normal, rhs.ravel(), x.ravel(), cg_tol,
                                    cg_iterations)
        x = sol.reshape(shape)
        gx, gy = _grad_pair(x, border)
        zx = soft_threshold(gx + ux, thresh)
        zy = soft_threshold(gy + uy, thresh)
        ux = ux + gx - zx
        uy = uy + gy - zy
        res = math.sqrt((((gx - zx) ** 2).sum() + ((gy - zy) ** 2).sum()) / x.size)
        if not math.isfinite(res):
            raise NonUniformSolveError("ADMM diverged")
        residuals.append(res)
        if res < tol:
            break
    out = np.clip(x, 0.0, 1.0) if clip else x
    return (out, residuals) if return_info else out


# --------------------------------------------------------------------------
# blind pipeline


def _nu_step(x_l, x_pr, b, basis, cfg, pcfg, order, v, lam_k, lam_v):
    x_hat = reconstruct_sharp(x_l, x_pr, cfg)
    weights, est = estimate_nu_kernel(x_hat, b, basis, lam_k, lam_v, order,
                                      cfg.kernel_iterations, v, pcfg.cg_tol,
                                      pcfg.cg_iterations, cfg.lambda_ref)
    x_new = nu_tv_deblur(b, weights, basis, cfg.mu, cfg.admm_rho,
                         cfg.admm_iterations, cfg.admm_tol, pcfg.cg_tol,
                         pcfg.cg_iterations)
    return x_new, weights, est


def nu_blind_deblur(b, cfg=None, pcfg=None):
    """Coarse-to-fine blind deblurring under the pose model.

    Same level loop and refinement as the uniform pipeline; the pose grid
    keeps its rotations at every level while the translation grid follows
    the level's kernel size.
    """
    cfg = cfg or DeblurConfig()
    pcfg = pcfg or PoseGridConfig()
    b = np.asarray(b, dtype=float)
    luma = to_luminance(b)
    fine = PoseBasis.from_config(luma.shape, cfg.kernel_size, pcfg)
    t0 = time.perf_counter()
    sched = build_schedule(luma.shape, cfg.kernel_size, cfg.beta, cfg.min_level_size)
    pyr = build_pyramid(luma, sched)
    trace = []
    x_pr = pyr[0]
    x_l = luma.copy()
    weights = PoseWeights.identity(fine)
    for lv in sched.levels[1:]:
        b_l = pyr[lv.index]
        basis = fine.rescaled(lv.shape, lv.kernel_size)
        x_l = b_l.copy()
        v = None
        for it in range(cfg.max_iteration):
            try:
                x_l, weights, est = _nu_step(x_l, x_pr, b_l, basis, cfg, pcfg, 1,
                                             v, cfg.lambda1, cfg.lambda2)
            except Exception as exc:
                raise PipelineError(f"level {lv.index}: {exc}") from exc
            v = est.v
        trace.append(TraceEntry("preliminary", lv.index, cfg.max_iteration,
                                weights.marginal() if cfg.max_iteration
                                else delta_kernel(lv.kernel_size)))
        x_pr = x_l
    t1 = time.perf_counter()
    v = None
    for it in range(cfg.max_iteration):
        try:
            smooth = guided_filter(x_l, x_l, cfg.guided_radius, cfg.guided_eps)
            x_pr = lowpass_downsample(smooth, cfg.beta)
            x_l, weights, est = _nu_step(x_l, x_pr, luma, fine, cfg, pcfg, 2, v,
                                         cfg.lambda3, cfg.lambda4)
        except Exception as exc:
            raise PipelineError(f"refinement iteration {it}: {exc}") from exc
        v = est.v
        trace.append(TraceEntry("refine", -1, it, weights.marginal()))
    t2 = time.perf_counter()
    if weights.k.shape[1] != fine.kernel_size:
        weights = PoseWeights.identity(fine)
    out = nu_tv_deblur(b, weights, fine, cfg.mu, cfg.admm_rho, cfg.admm_iterations,
                       cfg.admm_tol, pcfg.cg_tol, pcfg.cg_iterations)
    timings = {"preliminary": t1 - t0, "refine": t2 - t1,
               "final": time.perf_counter() - t2}
    return DeblurResult(weights.marginal(), out, trace, timings, weights)


def local_kernel(weights, basis, point):
    """PSF at pixel ``point = (y, x)``: each pose's weight splatted
    (bilinearly) at the displacement the pose produces there."""
    w = weights.k if isinstance(weights, PoseWeights) else np.asarray(weights)
    n = basis.kernel_size + 2 * _max_rotation_shift(basis)
    c = n // 2
    out = np.zeros((n, n))
    py, px = point
    for j, h in enumerate(basis.base):
        s = h @ np.array([px, py, 1.0])
        # the image content at source s lands on the output pixel, so the
        # PSF of a source point is displaced by the inverse offset
        dy0, dx0 = py - s[1] / s[2], px - s[0] / s[2]
        for a in range(basis.kernel_size):
            for bb in range(basis.kernel_size):
                val = w[j, a, bb]
                if val == 0:
                    continue
                y = c + dy0 + a - basis.radius
                x = c + dx0 + bb - basis.radius
                y0, x0 = int(math.floor(y)), int(math.floor(x))
                fy, fx = y - y0, x - x0
                for dy, dx, f in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                                  (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
                    if 0 <= y0 + dy < n and 0 <= x0 + dx < n:
                        out[y0 + dy, x0 + dx] += val * f
    return out


def _max_rotation_shift(basis):
    ny, nx = basis.shape
    corners = np.array([[0, 0, 1], [nx - 1, 0, 1], [0, ny - 1, 1],
                        [nx - 1, ny - 1, 1]], dtype=float).T
    m = 0.0
    for h in basis.base:
        s = h @ corners
        m = max(m, float(np.abs(s[:2] / s[2] - corners[:2]).max()))
    return int(math.ceil(m))


def render_kernel_grid(weights, basis, grid=(4, 4), gap=2):
    """Mosaic of local PSFs sampled on a ``grid`` of image regions, each
    tile scaled to its own maximum (for inspection, cf. camera-shake
    visualizations)."""
    gy, gx = grid
    ny, nx = basis.shape
    tiles = []
    for i in range(gy):
        row = []
        for j in range(gx):
            p = ((i + 0.5) * ny / gy - 0.5, (j + 0.5) * nx / gx - 0.5)
            k = local_kernel(weights, basis, p)
            row.append(k / k.max() if k.max() > 0 else k)
        tiles.append(row)
    t = tiles[0][0].shape[0]
    out = np.zeros((gy * t + (gy + 1) * gap, gx * t + (gx + 1) * gap))
    for i in range(gy):
        for j in range(gx):
            y = gap + i * (t + gap)
            x = gap + j * (t + gap)
            out[y:y + t, x:x + t] = tiles[i][j]
    return out
