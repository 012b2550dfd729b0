import glob
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msls import patchmatch as pm
from msls.core import DeblurConfig, convolve2d, random_motion_kernel
from msls.io import load_image
from msls.metrics import psnr
from msls.pyramid import lowpass_downsample, resample_bilinear

from conftest import DATA

CFG = DeblurConfig()
BACKENDS = ["numpy"] + (["cython"] if pm.BACKEND == "cython" else [])


def brute_reconstruct(x_l, x_pr, p=5, stride=2, window=10):
    """Loop-by-loop reference: window of (window - p + 1)^2 candidates whose
    top-left corners start (window - p + 1) // 2 before the projected
    top-left, clipped to the prior; raster-first minimum; Hamming fusion."""
    n = window - p + 1
    hy, wx = x_l.shape
    py_, px_ = x_pr.shape

    def anchors(size):
        a = list(range(0, size - p + 1, stride))
        if a[-1] != size - p:
            a.append(size - p)
        return a

    def proj(c, size_l, size_pr):
        return int(np.rint((c + p // 2 + 0.5) * size_pr / size_l - 0.5)) - p // 2

    w1 = np.array([0.54 - 0.46 * math.cos(2 * math.pi * i / (p - 1)) for i in range(p)])
    W = np.outer(w1, w1)
    num = np.zeros_like(x_l)
    den = np.zeros_like(x_l)
    for ay in anchors(hy):
        for ax in anchors(wx):
            cy0 = proj(ay, hy, py_) - n // 2
            cx0 = proj(ax, wx, px_) - n // 2
            best, by, bx = None, None, None
            for cy in range(max(cy0, 0), min(cy0 + n - 1, py_ - p) + 1):
                for cx in range(max(cx0, 0), min(cx0 + n - 1, px_ - p) + 1):
                    d = 0.0
                    for u in range(p):
                        for v in range(p):
                            d += (x_l[ay + u, ax + v] - x_pr[cy + u, cx + v]) ** 2
                    if best is None or d < best:
                        best, by, bx = d, cy, cx
            num[ay:ay + p, ax:ax + p] += W * x_pr[by:by + p, bx:bx + p]
            den[ay:ay + p, ax:ax + p] += W
    return num / den


def test_hamming_values():
    w = pm.hamming_window(5)
    assert w[0] == pytest.approx(0.08)
    assert w[2] == pytest.approx(1.0)
    W = pm.hamming_weights(5)
    assert W[2, 2] == pytest.approx(1.0)
    assert np.allclose(W, W[::-1, :]) and np.allclose(W, W[:, ::-1])
    assert W.min() > 0 and W.max() <= 1 + 1e-15


@pytest.mark.parametrize("n", [2, 3, 4, 7, 12])
def test_hamming_symmetry(n):
    w = pm.hamming_window(n)
    assert np.allclose(w, w[::-1])


@pytest.mark.parametrize("shape", [(20, 20), (23, 17), (5, 9), (64, 41)])
def test_grid_covers_every_pixel(shape):
    g = pm.patch_grid(shape, 5, 2)
    cover = np.zeros(shape, int)
    for y in g.anchors_y:
        for x in g.anchors_x:
            cover[y:y + g.patch_size, x:x + g.patch_size] += 1
    assert cover.min() >= 1
    if min(shape) >= 12:
        assert cover[4:-4, 4:-4].min() >= 4
    assert g.anchors_y[-1] == shape[0] - g.patch_size


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_loop_reference(rng, backend):
    x_l = rng.random((21, 26))
    x_pr = lowpass_downsample(x_l, CFG.beta)
    out = pm.reconstruct_sharp(x_l, x_pr, CFG, backend=backend)
    assert np.allclose(out, brute_reconstruct(x_l, x_pr), atol=1e-12)


def test_backends_bit_identical(camera):
    if "cython" not in BACKENDS:
        pytest.skip("compiled extension not built")
    x_pr = lowpass_downsample(camera, CFG.beta)
    a, ma = pm.reconstruct_sharp(camera, x_pr, CFG, backend="numpy", return_matches=True)
    b, mb = pm.reconstruct_sharp(camera, x_pr, CFG, backend="cython", return_matches=True)
    assert np.array_equal(a, b)
    assert np.array_equal(ma.match_y, mb.match_y) and np.array_equal(ma.match_x, mb.match_x)
    assert ma.n_candidates == mb.n_candidates


def test_single_search_agrees_with_field(camera):
    x_l = camera[:80, :90]
    x_pr = lowpass_downsample(x_l, CFG.beta)
    _, mf = pm.reconstruct_sharp(x_l, x_pr, CFG, return_matches=True)
    for i in range(0, len(mf.anchors_y), 37):
        r = pm.local_nn_search(x_l, x_pr, (mf.anchors_y[i], mf.anchors_x[i]), CFG)
        assert r.match == (mf.match_y[i], mf.match_x[i])
        src = x_l[r.anchor[0]:r.anchor[0] + 5, r.anchor[1]:r.anchor[1] + 5]
        dst = x_pr[r.match[0]:r.match[0] + 5, r.match[1]:r.match[1] + 5]
        assert r.distance == pytest.approx(np.sqrt(((src - dst) ** 2).sum()), abs=1e-12)


def test_upscaled_prior_matches_near_projection(rng):
    x_pr = lowpass_downsample(rng.random((64, 64)), 2.0)
    x_pr = lowpass_downsample(x_pr, 1.0)
    x_l = resample_bilinear(x_pr, (51, 51))
    for anchor in [(10, 10), (20, 30), (40, 5)]:
        r = pm.local_nn_search(x_l, x_pr, anchor, CFG)
        assert max(abs(r.match[0] - r.projected[0]), abs(r.match[1] - r.projected[1])) <= 1


def test_constant_ties_pick_top_left():
    x_l = np.full((30, 30), 0.4)
    x_pr = np.full((19, 19), 0.4)
    r = pm.local_nn_search(x_l, x_pr, (12, 12), CFG)
    assert r.distance == 0
    ylo, _, _ = pm._candidate_range(np.array([12]), 5, 30, 19, 6)
    assert r.match == (int(ylo[0]), int(ylo[0]))


def test_clipped_corner_window(rng):
    x_l = rng.random((30, 30))
    x_pr = rng.random((19, 19))
    r = pm.local_nn_search(x_l, x_pr, (0, 0), CFG)
    assert r.n_candidates < 36 and r.match[0] >= 0 and r.match[1] >= 0


def test_anchor_out_of_bounds(rng):
    with pytest.raises(IndexError):
        pm.local_nn_search(rng.random((20, 20)), rng.random((12, 12)), (17, 0), CFG)


def test_constant_inputs_give_constant_output():
    out = pm.reconstruct_sharp(np.full((33, 40), 0.6), np.full((21, 25), 0.6), CFG)
    assert np.allclose(out, 0.6, atol=1e-15)


def test_partition_of_unity(rng):
    out = pm.reconstruct_sharp(rng.random((33, 40)), np.ones((21, 25)), CFG)
    assert np.allclose(out, 1.0, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(12, 60), w=st.integers(12, 60), seed=st.integers(0, 999))
def test_locality_and_candidate_budget(h, w, seed):
    r = np.random.default_rng(seed)
    x_l = r.random((h, w))
    x_pr = lowpass_downsample(x_l, CFG.beta)
    _, mf = pm.reconstruct_sharp(x_l, x_pr, CFG, return_matches=True)
    bound = (CFG.search_window - CFG.patch_size) / 2 + 1
    assert np.abs(mf.match_y - mf.projected_y).max() <= bound
    assert np.abs(mf.match_x - mf.projected_x).max() <= bound
    n = len(mf.anchors_y)
    assert mf.n_candidates <= n * (CFG.search_window - CFG.patch_size + 1) ** 2


def test_default_window_has_36_candidates(camera):
    r = pm.local_nn_search(camera, lowpass_downsample(camera, CFG.beta), (100, 100), CFG)
    assert r.n_candidates == 36


def test_deterministic(camera):
    x_pr = lowpass_downsample(camera, CFG.beta)
    assert np.array_equal(pm.reconstruct_sharp(camera, x_pr, CFG),
                          pm.reconstruct_sharp(camera, x_pr, CFG))


def test_offsets_dump_shape(camera):
    x = camera[:50, :60]
    _, mf = pm.reconstruct_sharp(x, lowpass_downsample(x, CFG.beta), CFG,
                                 return_matches=True)
    assert mf.offsets(x.shape).shape == (50, 60, 2)


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(DATA, "*.png")))
                         + sorted(glob.glob(os.path.join(DATA, "desk", "*.png"))),
                         ids=os.path.basename)
def test_self_consistency_psnr(path):
    x = load_image(path)
    out = pm.reconstruct_sharp(x, lowpass_downsample(x, CFG.beta), CFG)
    assert psnr(out, x) >= 30.0


def test_blurred_input_gets_sharper(camera):
    # a 7x7 motion blur and a prior down-sampled until the kernel is a delta
    k = random_motion_kernel(7, rng=11)
    b = convolve2d(camera, k)
    x_hat = pm.reconstruct_sharp(b, lowpass_downsample(b, 7.0), CFG)

    def energy(a):
        return (np.diff(a, axis=0) ** 2).sum() + (np.diff(a, axis=1) ** 2).sum()

    assert energy(x_hat) > energy(b)
