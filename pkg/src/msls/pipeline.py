"""Coarse-to-fine blind deblurring: preliminary restoration over the pyramid,
refinement at full resolution, then a final non-blind pass."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import DeblurConfig, delta_kernel, to_luminance
from .kernelest import estimate_kernel
from .nonblind import tv_deblur
from .patchmatch import reconstruct_sharp
from .pyramid import build_pyramid, build_schedule, lowpass_downsample

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class TraceEntry:
    """One preliminary level or one refinement iteration.

    ``objectives`` holds the final kernel-objective value of every
    alternation the entry covers.
    """
    phase: str  # "preliminary" or "refine"
    level: int
    iteration: int
    kernel: np.ndarray
    objectives: list = field(default_factory=list)

    @property
    def objective(self):
        return self.objectives[-1] if self.objectives else float("nan")

    @property
    def kernel_entropy(self):
        p = self.kernel[self.kernel > 0]
        return float(-(p * np.log(p)).sum())


@dataclass
class DeblurResult:
    kernel: np.ndarray
    image: np.ndarray
    trace: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    pose_weights: np.ndarray | None = None

    def trace_rows(self):
        for t in self.trace:
            yield {"phase": t.phase, "level": t.level, "iteration": t.iteration,
                   "objective": t.objective, "kernel_entropy": t.kernel_entropy}


def guided_filter(img, guide, radius=4, eps=1e-4):
    """Edge-preserving guided filter with box windows of side ``2 radius + 1``."""
    img = np.asarray(img, dtype=float)
    guide = np.asarray(guide, dtype=float)
    if img.shape != guide.shape:
        raise ValueError("img and guide must have the same shape")
    if radius < 1 or eps <= 0:
        raise ValueError("radius must be >= 1 and eps > 0")
    size = 2 * radius + 1

    def box(a):
        return ndimage.uniform_filter(a, size, mode="reflect")

    mean_i = box(guide)
    mean_p = box(img)
    cov_ip = box(guide * img) - mean_i * mean_p
    var_i = box(guide * guide) - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    c = mean_p - a * mean_i
    return box(a) * guide + box(c)


def _step(x_l, x_pr, b, cfg, kernel_size, order, v, lam_k, lam_v):
    x_hat = reconstruct_sharp(x_l, x_pr, cfg)
    est = estimate_kernel(x_hat, b, kernel_size, lam_k, lam_v, order=order,
                          iterations=cfg.kernel_iterations, v0=v,
                          floor=cfg.kernel_floor,
                          component_fraction=cfg.kernel_component_fraction,
                          track_objective=True, lam_ref=cfg.lambda_ref)
    x_new = tv_deblur(b, est.kernel, cfg.mu, cfg.admm_rho, cfg.admm_iterations,
                      cfg.admm_tol)
    return x_new, est


def preliminary_restore(b, cfg=None):
    """Run the per-level loop from the coarsest prior up to full resolution.

    At each level the latent image starts as the blurry level image and the
    kernel as a delta; the restored image becomes the next level's prior.
    """
    cfg = cfg or DeblurConfig()
    b = np.asarray(b, dtype=float)
    t0 = time.perf_counter()
    sched = build_schedule(b.shape, cfg.kernel_size, cfg.beta, cfg.min_level_size)
    pyr = build_pyramid(b, sched)
    trace = []
    x_pr = pyr[0]
    k = delta_kernel(1)
    x_l = b.copy()
    for lv in sched.levels[1:]:
        b_l = pyr[lv.index]
        x_l = b_l.copy()
        k = delta_kernel(lv.kernel_size)
        v = None
        objectives = []
        for it in range(cfg.max_iteration):
            try:
                x_l, est = _step(x_l, x_pr, b_l, cfg, lv.kernel_size, 1, v,
                                 cfg.lambda1, cfg.lambda2)
            except Exception as exc:
                raise PipelineError(f"level {lv.index}: {exc}") from exc
            k, v = est.kernel, est.v
            objectives.append(est.objective[-1])
        trace.append(TraceEntry("preliminary", lv.index, cfg.max_iteration, k,
                                objectives))
        log.debug("level %d %s done", lv.index, lv.shape)
        x_pr = x_l
    if sched.n_levels == 0:
        k = delta_kernel(cfg.kernel_size)
    return DeblurResult(k, x_l, trace, {"preliminary": time.perf_counter() - t0})


def refine_restore(b, x_tilde, cfg=None, kernel=None):
    """Full-resolution refinement with second-order derivatives; the prior is
    re-derived from the current estimate by guided filtering and one
    ``beta`` down-sampling step."""
    cfg = cfg or DeblurConfig()
    b = np.asarray(b, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x_tilde.shape != b.shape:
        raise ValueError("x_tilde must have the same shape as b")
    t0 = time.perf_counter()
    x_l = x_tilde.copy()
    k = kernel if kernel is not None else delta_kernel(cfg.kernel_size)
    trace = []
    v = None
    for it in range(cfg.max_iteration):
        try:
            smooth = guided_filter(x_l, x_l, cfg.guided_radius, cfg.guided_eps)
            x_pr = lowpass_downsample(smooth, cfg.beta)
            x_l, est = _step(x_l, x_pr, b, cfg, cfg.kernel_size, 2, v,
                             cfg.lambda3, cfg.lambda4)
        except Exception as exc:
            raise PipelineError(f"refinement iteration {it}: {exc}") from exc
        k, v = est.kernel, est.v
        trace.append(TraceEntry("refine", -1, it, k, [est.objective[-1]]))
    return DeblurResult(k, x_l, trace, {"refine": time.perf_counter() - t0})


def blind_deblur(b, cfg=None):
    """Estimate the kernel on luminance, then deblur every channel with it."""
    cfg = cfg or DeblurConfig()
    b = np.asarray(b, dtype=float)
    luma = to_luminance(b)
    pre = preliminary_restore(luma, cfg)
    ref = refine_restore(luma, pre.image, cfg, kernel=pre.kernel)
    t0 = time.perf_counter()
    out = tv_deblur(b, ref.kernel, cfg.mu, cfg.admm_rho, cfg.admm_iterations,
                    cfg.admm_tol)
    timings = {**pre.timings, **ref.timings, "final": time.perf_counter() - t0}
    return DeblurResult(ref.kernel, out, pre.trace + ref.trace, timings)
