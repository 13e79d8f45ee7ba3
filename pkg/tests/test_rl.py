"""
Unit tests for Richardson-Lucy deconvolution
"""

import numpy as np
import pytest

from echoinr.errors import DomainError
from echoinr.image import Image2D
from echoinr.psf import build_kernel, delta_kernel
from echoinr.rl import RlConfig, rl_deconvolve, rl_residual
from echoinr.tensorgraph import conv2d_same


def _blurred_impulse(kernel):
    values = np.full((31, 31), 1e-3)
    values[15, 15] = 1.0
    blurred = conv2d_same(values, kernel.values).value
    return Image2D(blurred, kernel.dx, kernel.dz)


def test_delta_kernel_is_fixed_point(rng):
    """With an identity PSF every iterate equals the input bit-for-bit"""
    d = Image2D(rng.uniform(0.1, 1.0, size=(9, 11)), 0.1, 0.1)
    out = rl_deconvolve(d, delta_kernel(0.1, 0.1), RlConfig(iterations=10))
    np.testing.assert_array_equal(out.values, d.values)


def test_delta_kernel_fixed_point_below_eps():
    """Pixels under the division guard stay bit-exact under an identity PSF"""
    values = np.array([[1e-12, 5e-10, 0.0], [3e-11, 0.5, 1e-15]])
    d = Image2D(values, 0.1, 0.1)
    cfg = RlConfig(iterations=10)
    assert values[values > 0].min() < cfg.eps
    out = rl_deconvolve(d, delta_kernel(0.1, 0.1), cfg)
    np.testing.assert_array_equal(out.values, values)


def test_constant_image_is_preserved(small_psf):
    """A flat image is already the solution"""
    d = Image2D(np.full((20, 20), 0.6), 0.09, 0.09)
    out = rl_deconvolve(d, build_kernel(small_psf, 0.09, 0.09))
    np.testing.assert_allclose(out.values, 0.6, rtol=1e-10)


def test_sharpens_blurred_impulse(small_psf):
    """Iterations concentrate energy back into the impulse"""
    kernel = build_kernel(small_psf, 0.09, 0.09)
    d = _blurred_impulse(kernel)
    out = rl_deconvolve(d, kernel, RlConfig(iterations=30))
    assert out.values[15, 15] > d.values[15, 15]
    assert np.unravel_index(np.argmax(out.values), out.shape) == (15, 15)


def test_estimate_stays_non_negative(small_psf, rng):
    """Multiplicative updates keep every pixel >= 0"""
    d = Image2D(rng.uniform(0.0, 1.0, size=(16, 16)), 0.09, 0.09)
    out = rl_deconvolve(d, build_kernel(small_psf, 0.09, 0.09), RlConfig(iterations=15))
    assert np.all(out.values >= 0)


def test_residual_decreases(small_psf):
    """Data misfit after many iterations is below the starting misfit"""
    kernel = build_kernel(small_psf, 0.09, 0.09)
    d = _blurred_impulse(kernel)
    residuals = []
    out = rl_deconvolve(d, kernel, RlConfig(iterations=20), residuals=residuals)
    assert len(residuals) == 20
    assert residuals[0] == pytest.approx(rl_residual(d, kernel, d))
    assert rl_residual(d, kernel, out) < residuals[0]


def test_tolerance_stops_early(small_psf):
    """A loose tolerance ends the loop before the iteration limit"""
    d = Image2D(np.full((16, 16), 0.5), 0.09, 0.09)
    residuals = []
    cfg = RlConfig(iterations=50, tolerance=1e-3)
    rl_deconvolve(d, build_kernel(small_psf, 0.09, 0.09), cfg, residuals=residuals)
    assert len(residuals) == 1


def test_linear_mode_returns_bmode_range(small_psf, rng):
    """Linear mode decompresses first and recompresses the estimate"""
    d = Image2D(rng.uniform(0.3, 0.9, size=(16, 16)), 0.09, 0.09)
    out = rl_deconvolve(d, build_kernel(small_psf, 0.09, 0.09), RlConfig(iterations=5, linear=True))
    assert np.all((out.values >= 0) & (out.values <= 1))


def test_rejects_negative_pixels():
    """Richardson-Lucy is defined for non-negative data only"""
    d = Image2D(np.array([[0.5, -0.1], [0.2, 0.3]]), 0.1, 0.1)
    with pytest.raises(DomainError):
        rl_deconvolve(d, delta_kernel(0.1, 0.1))


def test_rejects_spacing_mismatch(small_psf):
    """The PSF must be sampled at the image spacing"""
    d = Image2D(np.ones((20, 20)), 0.05, 0.05)
    with pytest.raises(DomainError):
        rl_deconvolve(d, build_kernel(small_psf, 0.09, 0.09))


def test_zero_iterations_rejected():
    """At least one iteration is required"""
    with pytest.raises(ValueError):
        RlConfig(iterations=0)
