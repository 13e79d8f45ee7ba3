"""
Richardson-Lucy deconvolution baseline

f_{n+1} = f_n * ((d / (h * f_n)) * h_flip), starting from f_0 = d, with the same
replicate-padded convolution the forward renderer uses.
"""

import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from echoinr.errors import DomainError, NumericalAbort, ShapeError
from echoinr.image import Image2D
from echoinr.psf import PsfKernel
from echoinr.render import DEFAULT_DYNAMIC_RANGE, DEFAULT_LOG_EPS, decompress, log_compress
from echoinr.tensorgraph import conv2d_same

logger = logging.getLogger(__name__)


class RlConfig(BaseModel):
    """Iteration count, division guard and optional early stop on relative change"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(30, ge=1)
    eps: float = Field(1e-9, gt=0)
    tolerance: float = Field(0.0, ge=0)
    linear: bool = False
    dynamic_range: float = Field(DEFAULT_DYNAMIC_RANGE, gt=0)


def _convolve(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return conv2d_same(values, kernel).value


def rl_deconvolve(
    d: Image2D,
    kernel: PsfKernel,
    cfg: Optional[RlConfig] = None,
    residuals: Optional[List[float]] = None,
) -> Image2D:
    """
    Deconvolve a non-negative image with a known PSF

    Args:
        d: Observed image (B-mode values by default, see ``cfg.linear``)
        kernel: PSF sampled at the image spacing
        cfg: Iteration settings
        residuals: If given, receives mean |d - h * f_n| for every iterate f_n

    Returns:
        Non-negative estimate on the same grid
    """
    cfg = cfg or RlConfig()
    if not kernel.matches(d.dx, d.dz):
        raise DomainError(
            f"PSF sampled at dx={kernel.dx:.4g}, dz={kernel.dz:.4g} mm but the image uses "
            f"dx={d.dx:.4g}, dz={d.dz:.4g} mm"
        )
    if np.any(d.values < 0):
        raise DomainError(f"Richardson-Lucy needs a non-negative image (min {d.values.min():.4g})")

    observed = decompress(d, cfg.dynamic_range).values if cfg.linear else d.values
    h = kernel.values
    h_flip = h[::-1, ::-1]
    f = observed.copy()

    for iteration in range(cfg.iterations):
        blurred = _convolve(f, h)
        if residuals is not None:
            residuals.append(float(np.mean(np.abs(observed - blurred))))
        # blurred is 0 only where f vanishes over the whole PSF support
        ratio = observed / np.where(blurred > 0, blurred, cfg.eps)
        f_next = f * _convolve(ratio, h_flip)
        if not np.all(np.isfinite(f_next)):
            raise NumericalAbort(
                f"Richardson-Lucy produced non-finite values at iteration {iteration}",
                op="rl_update",
                iteration=iteration,
            )
        if cfg.tolerance > 0:
            change = np.linalg.norm(f_next - f) / max(np.linalg.norm(f), cfg.eps)
            f = f_next
            if change < cfg.tolerance:
                logger.info("Richardson-Lucy converged after %d iterations", iteration + 1)
                break
        else:
            f = f_next

    estimate = d.with_values(f)
    if cfg.linear:
        estimate = log_compress(estimate, cfg.dynamic_range, DEFAULT_LOG_EPS)
    return estimate


def rl_residual(d: Image2D, kernel: PsfKernel, f: Image2D) -> float:
    """Mean absolute data misfit |d - h * f|"""
    if d.shape != f.shape:
        raise ShapeError("rl_residual", d.shape, f.shape)
    return float(np.mean(np.abs(d.values - _convolve(f.values, kernel.values))))
