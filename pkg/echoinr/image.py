"""
Image2D raster type and file IO (PFM, PGM, YAML sidecars)
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import yaml
from PIL import Image

from echoinr.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class Image2D:
    """
    Dense 2-D raster with physical pixel spacing

    Rows run along depth (z), columns along the lateral axis (x). The same type
    carries echogenicity maps, envelopes and B-mode images.
    """

    values: np.ndarray
    dx: float
    dz: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("Image2D", self.values.shape, (), "values must be 2-D")
        if self.dx <= 0 or self.dz <= 0:
            raise ValueError(f"Pixel spacing must be positive, got dx={self.dx}, dz={self.dz}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def extent_mm(self) -> Tuple[float, float]:
        """(width, depth) in mm"""
        rows, cols = self.shape
        return cols * self.dx, rows * self.dz

    def with_values(self, values: np.ndarray) -> "Image2D":
        return Image2D(values, self.dx, self.dz)

    def same_grid(self, other: "Image2D", tol: float = 1e-9) -> bool:
        return (
            self.shape == other.shape
            and abs(self.dx - other.dx) <= tol
            and abs(self.dz - other.dz) <= tol
        )


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """
    Write a grayscale little-endian PFM ("Pf", negative scale, rows bottom-to-top)

    Args:
        path: Output file
        values: 2-D array; stored as 32-bit floats
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError("write_pfm", values.shape, (), "grayscale PFM needs a 2-D array")
    rows, cols = values.shape
    payload = np.flipud(values).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (cols, rows))
        f.write(payload)


def read_pfm(path: PathLike) -> np.ndarray:
    """
    Read a grayscale PFM into a float64 array with row 0 at the top

    Args:
        path: PFM file

    Returns:
        Array of shape (rows, cols)
    """
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header != b"Pf":
            raise ConfigError(f"{path}: not a grayscale PFM (header {header!r})")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if dims is None:
            raise ConfigError(f"{path}: malformed PFM size line")
        cols, rows = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise ConfigError(f"{path}: malformed PFM scale line") from None
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")
    if data.size != rows * cols:
        raise ConfigError(f"{path}: expected {rows * cols} samples, found {data.size}")
    return np.flipud(data.reshape(rows, cols)).astype(np.float64)


def write_pgm(path: PathLike, values: np.ndarray) -> None:
    """8-bit preview: [0, 1] mapped linearly onto [0, 255]"""
    levels = np.round(np.clip(np.asarray(values), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(levels).save(path, format="PPM")


def read_pgm(path: PathLike) -> np.ndarray:
    """Read an 8-bit grayscale frame and map it linearly onto [0, 1]"""
    with Image.open(path) as img:
        levels = np.asarray(img.convert("L"), dtype=np.float64)
    return levels / 255.0


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".yaml")


def write_sidecar(path: PathLike, metadata: Dict[str, Any]) -> None:
    with open(sidecar_path(path), "w") as f:
        yaml.safe_dump(metadata, f, sort_keys=True, default_flow_style=False)


def read_sidecar(path: PathLike) -> Optional[Dict[str, Any]]:
    side = sidecar_path(path)
    if not side.exists():
        return None
    with open(side, "r") as f:
        return yaml.safe_load(f) or {}


def save_image(
    path: PathLike,
    image: Image2D,
    metadata: Optional[Dict[str, Any]] = None,
    preview: bool = False,
) -> None:
    """
    Write an Image2D as PFM plus a YAML sidecar holding its spacing

    Args:
        path: Output PFM path
        image: Image to store
        metadata: Extra sidecar fields (kind, seed, ...)
        preview: Also write an 8-bit PGM next to the PFM
    """
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(path, image.values)
    write_sidecar(path, {"dx": float(image.dx), "dz": float(image.dz), **(metadata or {})})
    if preview:
        write_pgm(path.with_suffix(".pgm"), image.values)
    logger.debug("Wrote %s (%dx%d)", path, *image.shape)


def load_image(
    path: PathLike, dx: Optional[float] = None, dz: Optional[float] = None
) -> Tuple[Image2D, Dict[str, Any]]:
    """
    Read a PFM or PGM image with its pixel spacing

    Spacing comes from explicit arguments first, then from the sidecar.

    Args:
        path: .pfm or .pgm file
        dx: Lateral spacing override in mm
        dz: Axial spacing override in mm

    Returns:
        (image, sidecar metadata)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image file not found: {path}")
    if path.suffix.lower() == ".pgm":
        values = read_pgm(path)
    else:
        values = read_pfm(path)
    metadata = read_sidecar(path) or {}
    dx = dx if dx is not None else metadata.get("dx")
    dz = dz if dz is not None else metadata.get("dz")
    if dx is None or dz is None:
        raise ConfigError(f"{path}: pixel spacing unknown; pass --dx/--dz or provide a sidecar")
    return Image2D(values, float(dx), float(dz)), metadata
