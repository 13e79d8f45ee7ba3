"""
Forward image formation: echogenicity -> envelope -> log-compressed B-mode

All functions accept either an ``Image2D`` (returns an ``Image2D``) or a
``Tensor`` (returns a ``Tensor`` recorded on the active tape), so the training
loop and the command line share one rendering path.
"""

import logging
import math
from typing import Union

import numpy as np

from echoinr.errors import DomainError, NyquistError
from echoinr.image import Image2D
from echoinr.psf import PsfKernel, PsfParams, build_kernel, check_nyquist
from echoinr.tensorgraph import Tensor, add, avg_pool, clamp, conv2d_same, log10_guarded, mul

logger = logging.getLogger(__name__)

DEFAULT_DYNAMIC_RANGE = 60.0
DEFAULT_LOG_EPS = 1e-8

Raster = Union[Image2D, Tensor]


def convolve_psf(s: Raster, kernel: PsfKernel) -> Raster:
    """
    Envelope e = h * s with replicate padding

    Args:
        s: Echogenicity map; an Image2D must share the kernel's spacing
        kernel: Discretized PSF

    Returns:
        Envelope of the same shape as s
    """
    if isinstance(s, Image2D):
        if not kernel.matches(s.dx, s.dz):
            raise DomainError(
                f"PSF sampled at dx={kernel.dx:.4g}, dz={kernel.dz:.4g} mm but the map "
                f"uses dx={s.dx:.4g}, dz={s.dz:.4g} mm"
            )
        return s.with_values(conv2d_same(Tensor(s.values), kernel.values).value)
    return conv2d_same(s, kernel.values)


def log_compress(
    e: Raster, dynamic_range: float = DEFAULT_DYNAMIC_RANGE, eps: float = DEFAULT_LOG_EPS
) -> Raster:
    """
    B = clamp(20 log10(e + eps) / DR + 1, 0, 1)

    Envelope 1.0 is the 0 dB reference; 10^(-DR/20) maps to the black floor.

    Args:
        e: Non-negative envelope
        dynamic_range: Displayed dynamic range in dB
        eps: Floor inside the logarithm

    Returns:
        B-mode values in [0, 1]
    """
    if dynamic_range <= 0:
        raise DomainError(f"Dynamic range must be positive, got {dynamic_range}")
    if eps <= 0:
        raise DomainError(f"Log floor eps must be positive, got {eps}")
    tensor = Tensor(e.values) if isinstance(e, Image2D) else e
    compressed = clamp(add(mul(log10_guarded(tensor, eps), 20.0 / dynamic_range), 1.0), 0.0, 1.0)
    if isinstance(e, Image2D):
        return e.with_values(compressed.value)
    return compressed


def decompress(b: Image2D, dynamic_range: float = DEFAULT_DYNAMIC_RANGE) -> Image2D:
    """Map B-mode values back to envelope amplitudes, 10^((B - 1) DR / 20)"""
    if dynamic_range <= 0:
        raise DomainError(f"Dynamic range must be positive, got {dynamic_range}")
    return b.with_values(10.0 ** ((b.values - 1.0) * dynamic_range / 20.0))


def add_noise(e: Image2D, sigma_n: float, rng: np.random.Generator) -> Image2D:
    """Additive zero-mean Gaussian noise, clamped so the envelope stays non-negative"""
    if sigma_n < 0:
        raise ValueError(f"Noise sigma must be non-negative, got {sigma_n}")
    if sigma_n == 0:
        return e.with_values(e.values.copy())
    noisy = e.values + rng.normal(0.0, sigma_n, size=e.shape)
    return e.with_values(np.maximum(noisy, 0.0))


def render_bmode(
    s: Tensor,
    kernel: PsfKernel,
    oversample: int = 1,
    dynamic_range: float = DEFAULT_DYNAMIC_RANGE,
    eps: float = DEFAULT_LOG_EPS,
) -> Tensor:
    """Differentiable chain used in training: convolve at fine spacing, pool, compress"""
    envelope = avg_pool(convolve_psf(s, kernel), oversample)
    return log_compress(envelope, dynamic_range, eps)


def render(
    s: Image2D,
    params: PsfParams,
    dynamic_range: float = DEFAULT_DYNAMIC_RANGE,
    eps: float = DEFAULT_LOG_EPS,
    noise_sigma: float = 0.0,
    rng: np.random.Generator = None,
) -> Image2D:
    """
    Simulate a B-mode image of an echogenicity map at its own pixel spacing

    Args:
        s: Echogenicity map
        params: PSF parameters; the map spacing must satisfy lambda/2 sampling
        dynamic_range: Displayed dynamic range in dB
        eps: Floor inside the logarithm
        noise_sigma: Envelope noise level (0 disables noise)
        rng: Generator for the noise draw

    Returns:
        B-mode image in [0, 1]
    """
    kernel = build_kernel(params, s.dx, s.dz)
    envelope = convolve_psf(s, kernel)
    if noise_sigma > 0:
        envelope = add_noise(envelope, noise_sigma, rng or np.random.default_rng())
    return log_compress(envelope, dynamic_range, eps)


def rebeam(
    s: Image2D,
    params: PsfParams,
    center_frequency: float,
    dynamic_range: float = DEFAULT_DYNAMIC_RANGE,
    eps: float = DEFAULT_LOG_EPS,
) -> Image2D:
    """
    Re-render an echogenicity map as if acquired at another transmit frequency

    Args:
        s: Echogenicity map (e.g. an INR estimate)
        params: PSF of the original system; only the frequency changes
        center_frequency: New center frequency in MHz
        dynamic_range: Displayed dynamic range in dB
        eps: Floor inside the logarithm

    Returns:
        B-mode image in [0, 1]
    """
    if center_frequency <= 0:
        raise ValueError(f"Center frequency must be positive, got {center_frequency}")
    target = params.with_frequency(center_frequency)
    try:
        check_nyquist(s.dx, target, "lateral")
        check_nyquist(s.dz, target, "axial")
    except NyquistError as exc:
        factor = math.ceil(max(s.dx, s.dz) / (target.wavelength / 2.0))
        raise NyquistError(exc.spacing, exc.wavelength, f"map (upsample by {factor}x)") from None
    logger.info("Rebeaming at %.3g MHz (lambda = %.4g mm)", center_frequency, target.wavelength)
    return log_compress(convolve_psf(s, build_kernel(target, s.dx, s.dz)), dynamic_range, eps)


def lateral_width_db(profile: np.ndarray, spacing: float, drop_db: float = 6.0) -> float:
    """
    Width of the main lobe around the maximum of a linear-amplitude profile

    Crossings of peak * 10^(-drop_db/20) are linearly interpolated between samples.

    Args:
        profile: 1-D non-negative amplitudes
        spacing: Sample step in mm
        drop_db: Level below the peak in dB

    Returns:
        Width in mm
    """
    profile = np.asarray(profile, dtype=np.float64)
    peak = int(np.argmax(profile))
    level = profile[peak] * 10.0 ** (-drop_db / 20.0)

    def crossing(step: int) -> float:
        i = peak
        while 0 <= i + step < profile.size and profile[i + step] >= level:
            i += step
        j = i + step
        if not 0 <= j < profile.size:
            return float(i)
        frac = (profile[i] - level) / (profile[i] - profile[j])
        return i + step * frac

    return (crossing(1) - crossing(-1)) * spacing


def first_zero_offset(profile: np.ndarray, spacing: float) -> float:
    """Distance in mm from the maximum to the first local minimum on the right"""
    profile = np.asarray(profile, dtype=np.float64)
    i = int(np.argmax(profile))
    while i + 1 < profile.size and profile[i + 1] < profile[i]:
        i += 1
    return (i - int(np.argmax(profile))) * spacing
