"""
Separable point spread function: sinc^2 lateral beam profile times Gaussian axial pulse
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from echoinr.errors import NyquistError
from echoinr.image import Image2D

logger = logging.getLogger(__name__)

# FWHM of a unit Gaussian is 2*sqrt(2 ln 2) standard deviations
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class PsfParams(BaseModel):
    """
    Acoustic parameters of the imaging system

    Lengths in mm, frequency in MHz, speed of sound in mm/us.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    center_frequency: float = Field(8.0, gt=0)
    speed_of_sound: float = Field(1.54, gt=0)
    focal_distance: float = Field(30.0, gt=0)
    f_number: float = Field(2.0, gt=0)
    n_cycles: int = Field(2, ge=1)

    @property
    def wavelength(self) -> float:
        return self.speed_of_sound / self.center_frequency

    @property
    def aperture(self) -> float:
        return self.focal_distance / self.f_number

    @property
    def sigma_z(self) -> float:
        """Axial Gaussian sigma whose FWHM equals the pulse length n_cycles * lambda"""
        return self.n_cycles * self.wavelength / FWHM_PER_SIGMA

    @property
    def first_lateral_zero(self) -> float:
        return self.focal_distance * self.wavelength / self.aperture

    def with_frequency(self, center_frequency: float) -> "PsfParams":
        return self.model_copy(update={"center_frequency": center_frequency})


@dataclass(frozen=True)
class PsfKernel:
    """Discretized, L1-normalized PSF sampled at (dz, dx) spacing"""

    values: np.ndarray
    dx: float
    dz: float
    normalization: str = "l1"
    params: Optional[PsfParams] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def center(self):
        rows, cols = self.values.shape
        return rows // 2, cols // 2

    def to_image(self) -> Image2D:
        return Image2D(self.values, self.dx, self.dz)

    def matches(self, dx: float, dz: float, tol: float = 1e-9) -> bool:
        return abs(self.dx - dx) <= tol and abs(self.dz - dz) <= tol


def lateral_profile(x, params: PsfParams):
    """
    Lateral pressure distribution at the focus, D^2 sinc^2(D x / (r lambda))

    Args:
        x: Lateral offset(s) in mm
        params: PSF parameters

    Returns:
        Profile value(s), same shape as x
    """
    D = params.aperture
    # np.sinc is the normalized sinc sin(pi u) / (pi u)
    return D * D * np.sinc(D * np.asarray(x) / (params.focal_distance * params.wavelength)) ** 2


def axial_profile(z, params: PsfParams):
    """Gaussian axial pulse exp(-z^2 / (2 sigma_z^2))"""
    sigma = params.sigma_z
    z = np.asarray(z)
    return np.exp(-(z * z) / (2.0 * sigma * sigma))


def check_nyquist(spacing: float, params: PsfParams, what: str = "grid") -> None:
    if spacing > params.wavelength / 2.0:
        raise NyquistError(spacing, params.wavelength, what)


def build_kernel(
    params: PsfParams, dx: float, dz: float, enforce_nyquist: bool = True
) -> PsfKernel:
    """
    Sample the separable PSF on a centered grid and L1-normalize it

    The lateral axis extends to the second zero of the sinc^2 (2 r lambda / D),
    the axial axis to 3 sigma_z.

    Args:
        params: PSF parameters
        dx: Lateral sampling step in mm
        dz: Axial sampling step in mm
        enforce_nyquist: Reject steps larger than lambda/2

    Returns:
        PsfKernel with odd dimensions and unit sum
    """
    if dx <= 0 or dz <= 0:
        raise ValueError(f"Kernel spacing must be positive, got dx={dx}, dz={dz}")
    if enforce_nyquist:
        check_nyquist(dx, params, "lateral")
        check_nyquist(dz, params, "axial")

    half_cols = int(math.floor(2.0 * params.first_lateral_zero / dx))
    half_rows = int(math.floor(3.0 * params.sigma_z / dz))
    x = np.arange(-half_cols, half_cols + 1) * dx
    z = np.arange(-half_rows, half_rows + 1) * dz

    lateral = lateral_profile(x, params)
    axial = axial_profile(z, params)
    values = np.outer(axial, lateral)
    values /= values.sum()

    logger.debug(
        "PSF kernel %dx%d at dx=%.4g dz=%.4g (f_c=%.3g MHz, f#=%.3g, cycles=%d)",
        values.shape[0], values.shape[1], dx, dz,
        params.center_frequency, params.f_number, params.n_cycles,
    )
    return PsfKernel(values=values, dx=dx, dz=dz, normalization="l1", params=params)


def delta_kernel(dx: float, dz: float) -> PsfKernel:
    """Identity kernel: a single unit sample"""
    return PsfKernel(values=np.ones((1, 1)), dx=dx, dz=dz, normalization="l1")
