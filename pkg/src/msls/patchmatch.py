"""Sharp image reconstruction by local self-example patch matching.

Every patch of the current latent image looks for its nearest neighbour in a
small window of the coarser (sharper) prior image around its projected
position; the matched prior patches are then blended with Hamming weights.

The search/fusion loop has two interchangeable backends: a compiled Cython
kernel (``msls._patchmatch_ext``) and a vectorized numpy fallback. The
compiled one is used when importable, unless ``MSLS_PURE_PYTHON=1``. Both
accumulate in the same order and return bit-identical results.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

THETA = 0.54
GAMMA = 0.46

try:
    if os.environ.get("MSLS_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _patchmatch_ext as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


@dataclass(frozen=True)
class MatchResult:
    anchor: tuple  # top-left in the latent image
    match: tuple  # top-left in the prior image
    projected: tuple  # projected top-left in the prior image
    distance: float
    n_candidates: int


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    anchors_y: np.ndarray
    anchors_x: np.ndarray

    @property
    def n_anchors(self):
        return len(self.anchors_y) * len(self.anchors_x)


def hamming_window(n):
    """1D window ``w(i) = theta - gamma cos(2 pi i / (n - 1))``."""
    if n < 2:
        return np.ones(max(n, 1))
    i = np.arange(n)
    return THETA - GAMMA * np.cos(2.0 * np.pi * i / (n - 1))


def hamming_weights(n):
    """Separable 2D Hamming weights ``W(i, j) = w(i) w(j)``."""
    w = hamming_window(n)
    return np.outer(w, w)


def _axis_anchors(size, patch, stride):
    a = list(range(0, size - patch + 1, stride))
    if a[-1] != size - patch:
        a.append(size - patch)
    return np.array(a, dtype=np.intp)


def effective_patch_size(patch_size, *shapes):
    p = min([patch_size] + [min(s) for s in shapes])
    return p if p % 2 else p - 1


def patch_grid(shape, patch_size=5, stride=2):
    """Overlapping patch anchors (top-left corners) covering ``shape``; the
    last row/column of anchors is clamped so patches stay inside."""
    p = effective_patch_size(patch_size, shape)
    return PatchGrid(p, stride, _axis_anchors(shape[0], p, stride),
                     _axis_anchors(shape[1], p, stride))


def _project(coord, size_l, size_pr):
    # pixel-center mapping of a latent-image coordinate onto the prior grid
    return np.rint((coord + 0.5) * (size_pr / size_l) - 0.5).astype(np.intp)


def _candidate_range(anchor, p, size_l, size_pr, n_cand):
    """Inclusive top-left range of the search window in the prior image."""
    center = _project(anchor + p // 2, size_l, size_pr)
    first = center - p // 2 - n_cand // 2
    lo = np.maximum(first, 0)
    hi = np.minimum(first + n_cand - 1, size_pr - p)
    empty = lo > hi
    if np.any(empty):
        fallback = np.clip(center - p // 2, 0, size_pr - p)
        lo = np.where(empty, fallback, lo)
        hi = np.where(empty, fallback, hi)
    return lo.astype(np.intp), hi.astype(np.intp), (center - p // 2).astype(np.intp)


def _plan(shape_l, shape_pr, patch_size, stride, search_window):
    p = effective_patch_size(patch_size, shape_l, shape_pr)
    n_cand = max(1, search_window - patch_size + 1)
    ay = _axis_anchors(shape_l[0], p, stride)
    ax = _axis_anchors(shape_l[1], p, stride)
    ylo, yhi, yproj = _candidate_range(ay, p, shape_l[0], shape_pr[0], n_cand)
    xlo, xhi, xproj = _candidate_range(ax, p, shape_l[1], shape_pr[1], n_cand)
    AY, AX = np.meshgrid(ay, ax, indexing="ij")
    YLO, XLO = np.meshgrid(ylo, xlo, indexing="ij")
    YHI, XHI = np.meshgrid(yhi, xhi, indexing="ij")
    YP, XP = np.meshgrid(yproj, xproj, indexing="ij")
    flat = lambda a: np.ascontiguousarray(a.ravel(), dtype=np.intp)  # noqa: E731
    return p, tuple(flat(a) for a in (AY, AX, YLO, YHI, XLO, XHI, YP, XP))


def _search_fuse_numpy(xl, xpr, ay, ax, ylo, yhi, xlo, xhi, w):
    p = w.shape[0]
    n = len(ay)
    best = np.full(n, np.inf)
    my = ylo.copy()
    mx = xlo.copy()
    span_y = int((yhi - ylo).max()) + 1
    span_x = int((xhi - xlo).max()) + 1
    count = int(((yhi - ylo + 1) * (xhi - xlo + 1)).sum())
    for a in range(span_y):
        cy = ylo + a
        vy = cy <= yhi
        cy = np.where(vy, cy, yhi)
        for b in range(span_x):
            cx = xlo + b
            valid = vy & (cx <= xhi)
            cx = np.where(cx <= xhi, cx, xhi)
            s = np.zeros(n)
            for u in range(p):
                for v in range(p):
                    d = xl[ay + u, ax + v] - xpr[cy + u, cx + v]
                    s += d * d
            better = valid & (s < best)
            best = np.where(better, s, best)
            my = np.where(better, cy, my)
            mx = np.where(better, cx, mx)
    num = np.zeros_like(xl)
    den = np.zeros_like(xl)
    for u in range(p):
        for v in range(p):
            num[ay + u, ax + v] += w[u, v] * xpr[my + u, mx + v]
            den[ay + u, ax + v] += w[u, v]
    return num, den, my, mx, best, count


def _search_fuse(xl, xpr, plan_arrays, w, backend=None):
    backend = backend or BACKEND
    ay, ax, ylo, yhi, xlo, xhi = plan_arrays[:6]
    xl = np.ascontiguousarray(xl, dtype=np.float64)
    xpr = np.ascontiguousarray(xpr, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled patch-matching extension is not available")
        num, den, my, mx, best, count = _ext.search_fuse(
            xl, xpr, ay, ax, ylo, yhi, xlo, xhi, w)
        return (np.asarray(num), np.asarray(den), np.asarray(my),
                np.asarray(mx), np.asarray(best), int(count))
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    return _search_fuse_numpy(xl, xpr, ay, ax, ylo, yhi, xlo, xhi, w)


def _params(cfg):
    if cfg is None:
        return 5, 2, 10
    return cfg.patch_size, cfg.patch_stride, cfg.search_window


def local_nn_search(x_l, x_pr, anchor, cfg=None):
    """Exhaustive scan of the local window for one latent-image patch.

    ``anchor`` is the patch's top-left corner in ``x_l``. Ties go to the
    first candidate in raster order.
    """
    patch_size, _, window = _params(cfg)
    x_l = np.asarray(x_l, dtype=float)
    x_pr = np.asarray(x_pr, dtype=float)
    p = effective_patch_size(patch_size, x_l.shape, x_pr.shape)
    y, x = (int(c) for c in anchor)
    if not (0 <= y <= x_l.shape[0] - p and 0 <= x <= x_l.shape[1] - p):
        raise IndexError(f"anchor {anchor} out of bounds")
    n_cand = max(1, window - patch_size + 1)
    ylo, yhi, yp = _candidate_range(np.array([y]), p, x_l.shape[0], x_pr.shape[0], n_cand)
    xlo, xhi, xp = _candidate_range(np.array([x]), p, x_l.shape[1], x_pr.shape[1], n_cand)
    src = x_l[y:y + p, x:x + p]
    best, by, bx, count = np.inf, int(ylo[0]), int(xlo[0]), 0
    for cy in range(int(ylo[0]), int(yhi[0]) + 1):
        for cx in range(int(xlo[0]), int(xhi[0]) + 1):
            count += 1
            d = float(((src - x_pr[cy:cy + p, cx:cx + p]) ** 2).sum())
            if d < best:
                best, by, bx = d, cy, cx
    return MatchResult((y, x), (by, bx), (int(yp[0]), int(xp[0])),
                       float(np.sqrt(best)), count)


@dataclass
class MatchField:
    anchors_y: np.ndarray
    anchors_x: np.ndarray
    match_y: np.ndarray
    match_x: np.ndarray
    projected_y: np.ndarray
    projected_x: np.ndarray
    distance: np.ndarray
    n_candidates: int
    patch_size: int

    def offsets(self, shape):
        """Two-channel image of match offsets from the projected position,
        painted at patch centers (debug dump)."""
        out = np.zeros(tuple(shape) + (2,))
        c = self.patch_size // 2
        out[self.anchors_y + c, self.anchors_x + c, 0] = self.match_y - self.projected_y
        out[self.anchors_y + c, self.anchors_x + c, 1] = self.match_x - self.projected_x
        return out


def reconstruct_sharp(x_l, x_pr, cfg=None, backend=None, return_matches=False):
    """Hamming-weighted fusion of the nearest prior patches of every latent
    patch; returns an image of the same size as ``x_l``."""
    patch_size, stride, window = _params(cfg)
    x_l = np.asarray(x_l, dtype=float)
    x_pr = np.asarray(x_pr, dtype=float)
    p, arrays = _plan(x_l.shape, x_pr.shape, patch_size, stride, window)
    w = hamming_weights(p)
    num, den, my, mx, best, count = _search_fuse(x_l, x_pr, arrays, w, backend)
    out = num / den
    if return_matches:
        mf = MatchField(arrays[0], arrays[1], my, mx, arrays[6], arrays[7],
                        np.sqrt(best), count, p)
        return out, mf
    return out
