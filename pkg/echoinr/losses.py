"""
Training objective: lambda * (1 - SSIM) + (1 - lambda) * L2 + epsilon * TV
"""

from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from echoinr.errors import ShapeError
from echoinr.tensorgraph import (
    ArrayLike,
    Tensor,
    abs_,
    add,
    as_tensor,
    conv2d_same,
    diff,
    div,
    mean,
    mul,
    square,
    sub,
    sum_,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class LossWeights(BaseModel):
    """Mix of the loss terms; ``l2_reduction='sum'`` restores the literal summed L2"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    ssim_weight: float = Field(0.5, ge=0.0, le=1.0)
    tv_weight: float = Field(1e-4, ge=0.0)
    l2_reduction: Literal["mean", "sum"] = "mean"


class LossTerms(NamedTuple):
    total: Tensor
    ssim: Tensor
    l2: Tensor
    tv: Tensor

    def as_floats(self) -> np.ndarray:
        return np.array([self.total.item(), self.ssim.item(), self.l2.item(), self.tv.item()])


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window"""
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    window = np.outer(profile, profile)
    return window / window.sum()


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def ssim_loss(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """
    Mean windowed SSIM between two images with unit dynamic range

    Local statistics use an 11 x 11 Gaussian window (sigma 1.5) with replicate
    padding, so every pixel contributes one window position.

    Args:
        pred: Predicted image
        target: Reference image

    Returns:
        0-D tensor with the SSIM value (1 for identical images)
    """
    a, b = as_tensor(pred), as_tensor(target)
    _same_shape("ssim", a, b)
    window = gaussian_window()

    mu_a = conv2d_same(a, window)
    mu_b = conv2d_same(b, window)
    mu_a2 = square(mu_a)
    mu_b2 = square(mu_b)
    mu_ab = mul(mu_a, mu_b)
    var_a = sub(conv2d_same(square(a), window), mu_a2)
    var_b = sub(conv2d_same(square(b), window), mu_b2)
    cov = sub(conv2d_same(mul(a, b), window), mu_ab)

    numerator = mul(add(mul(mu_ab, 2.0), SSIM_C1), add(mul(cov, 2.0), SSIM_C2))
    denominator = mul(add(add(mu_a2, mu_b2), SSIM_C1), add(add(var_a, var_b), SSIM_C2))
    return mean(div(numerator, denominator))


def l2_loss(pred: ArrayLike, target: ArrayLike, reduction: str = "mean") -> Tensor:
    a, b = as_tensor(pred), as_tensor(target)
    _same_shape("l2", a, b)
    squared = square(sub(a, b))
    return sum_(squared) if reduction == "sum" else mean(squared)


def tv_loss(s: ArrayLike) -> Tensor:
    """Anisotropic total variation averaged over all vertical and horizontal differences"""
    s = as_tensor(s)
    if s.ndim != 2 or min(s.shape) < 2:
        raise ShapeError("tv", s.shape, (2, 2), "map must be at least 2 x 2")
    rows, cols = s.shape
    count = (rows - 1) * cols + rows * (cols - 1)
    total = add(sum_(abs_(diff(s, 0))), sum_(abs_(diff(s, 1))))
    return mul(total, 1.0 / count)


def total_loss(pred: ArrayLike, target: ArrayLike, s: ArrayLike, weights: LossWeights) -> LossTerms:
    """
    Combined objective and its components

    Args:
        pred: Rendered B-mode at pixel resolution
        target: Observed B-mode
        s: Echogenicity samples the prediction was rendered from
        weights: Term weights

    Returns:
        LossTerms(total, ssim, l2, tv)
    """
    lam = weights.ssim_weight
    ssim = ssim_loss(pred, target)
    l2 = l2_loss(pred, target, weights.l2_reduction)
    tv = tv_loss(s)
    total = add(
        add(mul(sub(1.0, ssim), lam), mul(l2, 1.0 - lam)),
        mul(tv, weights.tv_weight),
    )
    return LossTerms(total, ssim, l2, tv)
