import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.linalg import LinearOperator, cg

from msls.core import (convolve2d, delta_kernel, gaussian_kernel, psf2otf,
                       random_motion_kernel)
from msls.nonblind import AdmmError, tv_deblur, tv_objective, x_update


def mse(a, b):
    return float(np.mean((a - b) ** 2))


def circ_matrix(k, shape):
    """Dense circular convolution by ``k`` (kernel center at the origin)."""
    h, w = shape
    n = h * w
    m = np.zeros((n, n))
    kh, kw = k.shape
    for i in range(h):
        for j in range(w):
            row = i * w + j
            for a in range(kh):
                for b in range(kw):
                    y = (i - (a - kh // 2)) % h
                    x = (j - (b - kw // 2)) % w
                    m[row, y * w + x] += k[a, b]
    return m


def diff_matrix(shape, axis):
    h, w = shape
    n = h * w
    m = np.zeros((n, n))
    for i in range(h):
        for j in range(w):
            row = i * w + j
            m[row, row] = -1.0
            if axis == 1:
                m[row, i * w + (j + 1) % w] += 1.0
            else:
                m[row, ((i + 1) % h) * w + j] += 1.0
    return m


def test_delta_kernel_is_identity(small_camera):
    # read as MSE: the exact TV minimizer can move a pixel by up to 4 mu
    out = tv_deblur(small_camera, delta_kernel(1))
    assert mse(out, small_camera) <= 1e-3


@pytest.mark.parametrize("ks,seed", [(9, 1), (15, 2)])
def test_true_kernel_halves_mse(camera, ks, seed):
    k = random_motion_kernel(ks, rng=seed)
    r = np.random.default_rng(seed)
    b = convolve2d(camera, k) + 0.01 * r.normal(size=camera.shape)
    out = tv_deblur(b, k)
    assert mse(out, camera) <= 0.5 * mse(b, camera)


def test_large_mu_flattens(small_camera):
    # the penalty scales with mu so 30 iterations reach the TV-dominated limit
    out = tv_deblur(small_camera, gaussian_kernel(5, 1.0), mu=1e4, rho=1e4)
    assert np.var(out) < 1e-3 * np.var(small_camera)


def test_lagrangian_non_increasing_after_iteration_3(camera):
    k = random_motion_kernel(11, rng=5)
    r = np.random.default_rng(5)
    b = convolve2d(camera, k) + 0.01 * r.normal(size=camera.shape)
    _, info = tv_deblur(b, k, tol=0.0, return_info=True)
    lag = np.array(info.lagrangian[2:])
    assert np.all(np.diff(lag) <= 1e-6 * np.abs(lag[:-1]))


def test_x_update_matches_conjugate_gradient(rng):
    shape = (32, 32)
    k = random_motion_kernel(7, rng=3)
    bt = rng.random(shape)
    z = {d: 0.1 * rng.normal(size=shape) for d in ("x", "y")}
    u = {d: 0.1 * rng.normal(size=shape) for d in ("x", "y")}
    rho = 1.0
    x = x_update(bt, psf2otf(k, shape), z, u, rho)

    A = circ_matrix(k, shape)
    Dx, Dy = diff_matrix(shape, 1), diff_matrix(shape, 0)
    lhs = A.T @ A + rho * (Dx.T @ Dx + Dy.T @ Dy)
    rhs = A.T @ bt.ravel() + rho * (Dx.T @ (z["x"] - u["x"]).ravel()
                                    + Dy.T @ (z["y"] - u["y"]).ravel())
    op = LinearOperator(lhs.shape, matvec=lambda v: lhs @ v)
    ref, status = cg(op, rhs, rtol=1e-12, maxiter=5000)
    assert status == 0
    assert np.max(np.abs(x.ravel() - ref)) <= 1e-6


def test_dense_operators_agree_with_fft(rng):
    # sanity of the oracle's matrices against the library's forward model
    shape = (12, 12)
    k = random_motion_kernel(5, rng=2)
    x = rng.random(shape)
    kx = np.real(np.fft.ifft2(psf2otf(k, shape) * np.fft.fft2(x)))
    assert np.allclose(circ_matrix(k, shape) @ x.ravel(), kx.ravel())


@pytest.mark.parametrize("ks,seed", [(9, 1), (15, 2), (23, 3)])
def test_primal_residual_drops_tenfold(camera, ks, seed):
    k = random_motion_kernel(ks, rng=seed)
    r = np.random.default_rng(seed)
    b = convolve2d(camera, k) + 0.01 * r.normal(size=camera.shape)
    _, info = tv_deblur(b, k, return_info=True)
    assert info.residual[-1] <= 0.1 * info.residual[0]


def test_output_clamped(camera):
    k = random_motion_kernel(9, rng=4)
    b = convolve2d(camera, k) + 0.05 * np.random.default_rng(0).normal(size=camera.shape)
    out = tv_deblur(b, k)
    assert out.min() >= 0.0 and out.max() <= 1.0
    raw = tv_deblur(b, k, clip=False)
    assert raw.min() < 0.0 or raw.max() > 1.0


def test_objective_below_input(camera):
    k = random_motion_kernel(9, rng=4)
    b = convolve2d(camera, k)
    out, info = tv_deblur(b, k, clip=False, return_info=True)
    K = psf2otf(k, b.shape)
    assert info.objective[-1] <= tv_objective(b, b, K, 0.01)


def test_color_channels_independent(small_camera):
    k = gaussian_kernel(5, 1.0)
    rgb = np.stack([small_camera, 1 - small_camera, 0.5 * small_camera], axis=-1)
    out = tv_deblur(rgb, k)
    for c in range(3):
        assert np.array_equal(out[..., c], tv_deblur(rgb[..., c], k))


def test_errors(small_camera):
    with pytest.raises(AdmmError, match="empty kernel"):
        tv_deblur(small_camera, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        tv_deblur(small_camera, delta_kernel(3), mu=0.0)
    with pytest.raises(AdmmError, match="ADMM diverged"):
        bad = small_camera.copy()
        bad[0, 0] = np.nan
        tv_deblur(bad, delta_kernel(3))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_state_shapes_and_range(seed):
    r = np.random.default_rng(seed)
    b = r.random((20, 24))
    k = random_motion_kernel(5, rng=seed)
    out, info = tv_deblur(b, k, return_info=True)
    assert out.shape == b.shape
    assert 1 <= info.iterations <= 30
    assert len(info.residual) == info.iterations
