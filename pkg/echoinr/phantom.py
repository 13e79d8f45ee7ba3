"""
Synthetic echogenicity phantoms: Rayleigh speckle, cylindrical inclusions and wire targets

The default layout follows the CIRS 054GS general-purpose phantom: three 8 mm
grayscale cylinders at +6/+3/-3 dB and twelve 80 um nylon wires near 30 mm
depth. The exact wire positions of the physical phantom are not published, so
the layout here is a documented stand-in; every field can be overridden from a
YAML spec file.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from echoinr.image import Image2D

logger = logging.getLogger(__name__)

RAYLEIGH_MEAN_FACTOR = math.sqrt(math.pi / 2.0)
WIRE_GAPS_MM = (0.25, 0.5, 1.0, 2.0, 3.0)
COVERAGE_SUBSAMPLES = 16
WIRE_PRESET_DB = 48.0


class Inclusion(BaseModel):
    """Cylinder cross-section with a contrast relative to the background"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    center: Tuple[float, float]
    radius: float = Field(gt=0)
    contrast_db: float = Field(allow_inf_nan=False)


class Wire(BaseModel):
    """Point-like reflector rendered without speckle"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    center: Tuple[float, float]
    radius: float = Field(0.04, gt=0)
    amplitude_db: float = Field(30.0, allow_inf_nan=False)


class PhantomSpec(BaseModel):
    """
    Declarative scene description; coordinates are (x, z) in mm from the top-left corner
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    width_mm: float = Field(gt=0)
    depth_mm: float = Field(gt=0)
    dx: float = Field(0.05, gt=0)
    dz: float = Field(0.05, gt=0)
    background_mean: float = Field(1.0, gt=0, allow_inf_nan=False)
    inclusions: List[Inclusion] = Field(default_factory=list)
    wires: List[Wire] = Field(default_factory=list)
    rng_seed: int = 0

    @model_validator(mode="after")
    def _geometry_inside(self) -> "PhantomSpec":
        shapes = [("inclusion", s) for s in self.inclusions] + [("wire", s) for s in self.wires]
        for kind, shape in shapes:
            x, z = shape.center
            r = shape.radius
            if x - r < 0 or z - r < 0 or x + r > self.width_mm or z + r > self.depth_mm:
                raise ValueError(
                    f"{kind} at ({x}, {z}) with radius {r} leaves the "
                    f"{self.width_mm} x {self.depth_mm} mm image"
                )
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return int(round(self.depth_mm / self.dz)), int(round(self.width_mm / self.dx))


def db_to_amplitude(db: float) -> float:
    """Amplitude ratio for a level in dB (20 log10 convention)"""
    return 10.0 ** (db / 20.0)


def rayleigh_inverse_cdf(u, sigma):
    """Quantile function of the Rayleigh law, sigma * sqrt(-2 ln(1 - u))"""
    return sigma * np.sqrt(-2.0 * np.log1p(-np.asarray(u)))


def rayleigh_sample(sigma, rng: np.random.Generator, size=None):
    """
    Draw Rayleigh-distributed amplitudes by inverse-CDF sampling

    Args:
        sigma: Scale parameter (scalar or array broadcastable to size)
        rng: Random generator owned by the caller
        size: Output shape; None draws a single value

    Returns:
        Sample(s) >= 0
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("Rayleigh scale must be positive")
    return rayleigh_inverse_cdf(rng.random(size), sigma)


def sigma_from_mean(mu):
    """Rayleigh scale for a given mean amplitude (mu = sigma * sqrt(pi / 2))"""
    if np.any(np.asarray(mu) <= 0):
        raise ValueError(f"Mean amplitude must be positive, got {mu}")
    return mu / RAYLEIGH_MEAN_FACTOR


def pixel_centers(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(X, Z) grids of pixel-center coordinates in mm"""
    rows, cols = spec.shape
    x = (np.arange(cols) + 0.5) * spec.dx
    z = (np.arange(rows) + 0.5) * spec.dz
    return np.meshgrid(x, z)


def inclusion_mask(spec: PhantomSpec, index: int, margin: float = 0.0) -> np.ndarray:
    """Pixels whose centers lie inside an inclusion shrunk by ``margin`` mm"""
    X, Z = pixel_centers(spec)
    inc = spec.inclusions[index]
    radius = inc.radius - margin
    return (X - inc.center[0]) ** 2 + (Z - inc.center[1]) ** 2 <= radius * radius


def _check_overlaps(inclusions: List[Inclusion]) -> None:
    for i, a in enumerate(inclusions):
        for b in inclusions[i + 1 :]:
            gap = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
            if gap < a.radius + b.radius:
                raise ValueError(
                    f"Inclusions at {a.center} and {b.center} overlap; contrast is ambiguous"
                )


def _wire_coverage(spec: PhantomSpec, wire: Wire):
    """Area fraction of each nearby pixel covered by the wire disc"""
    rows, cols = spec.shape
    x0, z0 = wire.center
    r = wire.radius
    j0 = max(int(math.floor((x0 - r) / spec.dx)), 0)
    j1 = min(int(math.floor((x0 + r) / spec.dx)), cols - 1)
    i0 = max(int(math.floor((z0 - r) / spec.dz)), 0)
    i1 = min(int(math.floor((z0 + r) / spec.dz)), rows - 1)

    offsets = (np.arange(COVERAGE_SUBSAMPLES) + 0.5) / COVERAGE_SUBSAMPLES
    xs = (np.arange(j0, j1 + 1)[:, None] + offsets[None, :]).reshape(-1) * spec.dx
    zs = (np.arange(i0, i1 + 1)[:, None] + offsets[None, :]).reshape(-1) * spec.dz
    X, Z = np.meshgrid(xs, zs)
    inside = ((X - x0) ** 2 + (Z - z0) ** 2 <= r * r).astype(np.float64)
    n = COVERAGE_SUBSAMPLES
    coverage = inside.reshape(i1 - i0 + 1, n, j1 - j0 + 1, n).mean(axis=(1, 3))
    return (slice(i0, i1 + 1), slice(j0, j1 + 1)), coverage


def rasterize(spec: PhantomSpec, rng: Optional[np.random.Generator] = None) -> Image2D:
    """
    Render a phantom spec into an echogenicity map

    Speckle regions draw i.i.d. Rayleigh amplitudes whose mean is the region
    level; wires are blended in deterministically by pixel area coverage.

    Args:
        spec: Scene description
        rng: Random generator; defaults to one seeded with ``spec.rng_seed``

    Returns:
        Non-negative echogenicity map at (spec.dx, spec.dz) spacing
    """
    _check_overlaps(spec.inclusions)
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)

    X, Z = pixel_centers(spec)
    means = np.full(X.shape, spec.background_mean)
    for inc in spec.inclusions:
        inside = (X - inc.center[0]) ** 2 + (Z - inc.center[1]) ** 2 <= inc.radius**2
        means[inside] = spec.background_mean * db_to_amplitude(inc.contrast_db)

    values = rayleigh_sample(sigma_from_mean(means), rng, size=means.shape)

    for wire in spec.wires:
        window, coverage = _wire_coverage(spec, wire)
        level = spec.background_mean * db_to_amplitude(wire.amplitude_db)
        values[window] = coverage * level + (1.0 - coverage) * values[window]

    logger.info(
        "Rasterized phantom %dx%d: %d inclusions, %d wires, seed %d",
        values.shape[0], values.shape[1], len(spec.inclusions), len(spec.wires), spec.rng_seed,
    )
    return Image2D(values, spec.dx, spec.dz)


def _wire_row(x_start: float, z: float, gaps, **kwargs) -> List[Wire]:
    xs = np.concatenate([[0.0], np.cumsum(gaps)]) + x_start
    return [Wire(center=(float(x), z), **kwargs) for x in xs]


def _wire_column(x: float, z_start: float, gaps, **kwargs) -> List[Wire]:
    zs = np.concatenate([[0.0], np.cumsum(gaps)]) + z_start
    return [Wire(center=(x, float(z)), **kwargs) for z in zs]


def default_cirs_spec() -> PhantomSpec:
    """
    Full-size layout: one lateral and one axial row of six wires each around 30 mm
    depth, gaps 0.25 / 0.5 / 1 / 2 / 3 mm, and three 8 mm cylinders at +6/+3/-3 dB
    """
    wires = _wire_row(6.0, 30.0, WIRE_GAPS_MM) + _wire_column(20.0, 27.0, WIRE_GAPS_MM)
    inclusions = [
        Inclusion(center=(8.0, 40.0), radius=4.0, contrast_db=6.0),
        Inclusion(center=(20.0, 40.0), radius=4.0, contrast_db=3.0),
        Inclusion(center=(32.0, 40.0), radius=4.0, contrast_db=-3.0),
    ]
    return PhantomSpec(
        width_mm=40.0, depth_mm=46.0, dx=0.05, dz=0.05,
        background_mean=1.0, inclusions=inclusions, wires=wires, rng_seed=0,
    )


def wire_phantom_spec(seed: int = 0) -> PhantomSpec:
    """
    128 x 128 wire scene at 0.05 mm pixels with twelve wires

    Gaps shrink to 0.25 / 0.5 / 0.75 / 1.0 / 1.25 mm so both rows fit in 6.4 mm.
    The background sits at -50 dB and the wires at +48 dB over it: a wire pixel stays
    under the display reference, and after blurring a wire still peaks about 20 dB
    above the speckle.
    """
    gaps = (0.25, 0.5, 0.75, 1.0, 1.25)
    kwargs = {"amplitude_db": WIRE_PRESET_DB}
    wires = _wire_row(1.0, 2.0, gaps, **kwargs) + _wire_column(5.4, 1.5, gaps, **kwargs)
    return PhantomSpec(
        width_mm=6.4, depth_mm=6.4, dx=0.05, dz=0.05,
        background_mean=db_to_amplitude(-50.0), wires=wires, rng_seed=seed,
    )


def speckle_phantom_spec(seed: int = 0) -> PhantomSpec:
    """
    256 x 256 patch of fully developed speckle at 0.05 mm pixels, no targets

    Calibration data for the PSF grid search, which reads the PSF off the speckle
    correlation. The background sits at -20 dB.
    """
    return PhantomSpec(
        width_mm=12.8, depth_mm=12.8, dx=0.05, dz=0.05,
        background_mean=db_to_amplitude(-20.0), rng_seed=seed,
    )


def inclusion_phantom_spec(seed: int = 0) -> PhantomSpec:
    """128 x 128 scene at 0.09 mm pixels with three 3 mm cylinders at +6/+3/-3 dB"""
    inclusions = [
        Inclusion(center=(2.16, 5.76), radius=1.5, contrast_db=6.0),
        Inclusion(center=(5.76, 5.76), radius=1.5, contrast_db=3.0),
        Inclusion(center=(9.36, 5.76), radius=1.5, contrast_db=-3.0),
    ]
    return PhantomSpec(
        width_mm=11.52, depth_mm=11.52, dx=0.09, dz=0.09,
        background_mean=db_to_amplitude(-20.0), inclusions=inclusions, rng_seed=seed,
    )


PRESETS = {
    "cirs": default_cirs_spec,
    "wires": wire_phantom_spec,
    "inclusions": inclusion_phantom_spec,
    "speckle": speckle_phantom_spec,
}
