"""
Implicit neural representation of an echogenicity field

A multi-resolution hash-grid encoding feeds a small ReLU MLP whose softplus
output is the (non-negative) echogenicity at a normalized coordinate
(x, z) in [0, 1]^2, x lateral and z axial.
"""

import copy
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from echoinr.errors import DomainError
from echoinr.image import Image2D
from echoinr.tensorgraph import (
    Tensor,
    add,
    affine,
    avg_pool,
    concat_cols,
    gather_rows,
    mul,
    relu,
    reshape,
    softplus,
)

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761)


class HashGridConfig(BaseModel):
    """Hash-grid encoding and MLP shape"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    levels: int = Field(15, ge=1)
    features_per_entry: int = Field(1, ge=1)
    table_size: int = 2**18
    base_resolution: int = Field(16, ge=2)
    max_resolution: Optional[int] = None
    hidden_width: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=1)

    @field_validator("table_size")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 1 or value & (value - 1):
            raise ValueError(f"table_size must be a power of two, got {value}")
        return value

    @model_validator(mode="after")
    def _resolution_order(self) -> "HashGridConfig":
        if self.max_resolution is not None and self.max_resolution < self.base_resolution:
            raise ValueError(
                f"max_resolution {self.max_resolution} is below base_resolution "
                f"{self.base_resolution}"
            )
        return self

    def for_grid(self, rows: int, cols: int) -> "HashGridConfig":
        """Fill in max_resolution from the (oversampled) grid when it is unset"""
        if self.max_resolution is not None:
            return self
        return self.model_copy(
            update={"max_resolution": max(rows, cols, self.base_resolution)}
        )

    @property
    def growth_factor(self) -> float:
        if self.max_resolution is None:
            raise ValueError("max_resolution is unset; call for_grid() first")
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1)
        )

    def resolutions(self) -> List[int]:
        b = self.growth_factor
        # the epsilon keeps the top level at N_max despite rounding in b**l
        return [
            int(math.floor(self.base_resolution * b**level + 1e-9))
            for level in range(self.levels)
        ]


class SamplingSpec(BaseModel):
    """Pixel grid of the target image and how the field is sampled on it"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    dx: float = Field(gt=0)
    dz: float = Field(gt=0)
    oversample: int = Field(1, ge=1)
    jitter: bool = True
    rng_seed: int = 0

    @property
    def fine_shape(self) -> Tuple[int, int]:
        return self.rows * self.oversample, self.cols * self.oversample

    @property
    def fine_dx(self) -> float:
        return self.dx / self.oversample

    @property
    def fine_dz(self) -> float:
        return self.dz / self.oversample

    @classmethod
    def for_image(cls, image: Image2D, oversample: int = 1, **kwargs) -> "SamplingSpec":
        rows, cols = image.shape
        return cls(rows=rows, cols=cols, dx=image.dx, dz=image.dz, oversample=oversample, **kwargs)


def hash_index(vx, vz, table_size: int):
    """
    Spatial hash (vx * 1 XOR vz * 2654435761) mod T of integer grid vertices

    Args:
        vx: Lateral vertex index (scalar or array)
        vz: Axial vertex index (scalar or array)
        table_size: Power-of-two table length T

    Returns:
        int64 index (array) in [0, T)
    """
    vx = np.asarray(vx, dtype=np.uint64)
    vz = np.asarray(vz, dtype=np.uint64)
    mixed = (vx * np.uint64(HASH_PRIMES[0])) ^ (vz * np.uint64(HASH_PRIMES[1]))
    return (mixed & np.uint64(table_size - 1)).astype(np.int64)


def bilinear_corners(coords: np.ndarray, resolution: int):
    """
    Enclosing cell vertices and bilinear weights at one level

    Args:
        coords: (N, 2) normalized (x, z) coordinates
        resolution: Cells per axis N_l

    Returns:
        List of four ((vx, vz), weight) pairs; vx, vz int arrays (N,), weight (N, 1)
    """
    scaled = coords * resolution
    cell = np.minimum(np.floor(scaled), resolution - 1).astype(np.int64)
    frac = scaled - cell
    fx, fz = frac[:, 0:1], frac[:, 1:2]
    vx, vz = cell[:, 0], cell[:, 1]
    return [
        ((vx, vz), (1.0 - fx) * (1.0 - fz)),
        ((vx + 1, vz), fx * (1.0 - fz)),
        ((vx, vz + 1), (1.0 - fx) * fz),
        ((vx + 1, vz + 1), fx * fz),
    ]


class InrModel:
    """
    Hash-grid encoding plus MLP, with trainable tensors exposed by ``parameters()``

    Tables start uniform in [-1e-4, 1e-4]; hidden layers use He fan-in scaling
    and the output layer starts at zero so the initial field is flat (ln 2).
    """

    def __init__(
        self, config: HashGridConfig, seed: int = 0, rng: Optional[np.random.Generator] = None
    ):
        if config.max_resolution is None:
            raise ValueError("HashGridConfig.max_resolution must be set (see for_grid)")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.config = config
        self.resolutions = config.resolutions()

        T, F = config.table_size, config.features_per_entry
        self.tables = [
            Tensor(rng.uniform(-1e-4, 1e-4, size=(T, F)), requires_grad=True, name=f"table_{level}")
            for level in range(config.levels)
        ]

        widths = [config.levels * F] + [config.hidden_width] * config.hidden_layers + [1]
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if layer == len(widths) - 2:
                W = np.zeros((fan_out, fan_in))
            else:
                W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            self.weights.append(Tensor(W, requires_grad=True, name=f"weight_{layer}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"bias_{layer}"))

    def parameters(self) -> List[Tensor]:
        mlp = [p for pair in zip(self.weights, self.biases) for p in pair]
        return self.tables + mlp

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"table_{i}": t.value for i, t in enumerate(self.tables)}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"weight_{i}"] = W.value
            arrays[f"bias_{i}"] = b.value
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        tensors = {t.name: t for t in self.parameters()}
        missing = set(tensors) - set(arrays)
        if missing:
            raise ValueError(f"Checkpoint lacks parameters: {sorted(missing)}")
        for name, tensor in tensors.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"{name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.value = value.copy()

    def copy(self) -> "InrModel":
        """Independent deep copy (e.g. a frozen reference)"""
        return copy.deepcopy(self)

    def encode(self, coords: np.ndarray) -> Tensor:
        return encode(coords, self)

    def forward(self, coords: np.ndarray) -> Tensor:
        """Echogenicity at each row of an (N, 2) coordinate array, shape (N, 1)"""
        h = encode(coords, self)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = relu(affine(h, W, b))
        return softplus(affine(h, self.weights[-1], self.biases[-1]))

    __call__ = forward


def encode(coords, model: InrModel) -> Tensor:
    """
    Multi-resolution hash encoding of normalized coordinates

    Args:
        coords: (x, z) pair or (N, 2) array in [0, 1]^2
        model: Model holding the per-level tables

    Returns:
        Tensor of shape (N, L * F), differentiable wrt the tables
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if np.any(coords < 0.0) or np.any(coords > 1.0) or not np.all(np.isfinite(coords)):
        raise DomainError("Coordinates must lie in [0, 1]^2")

    table_size = model.config.table_size
    features = []
    for resolution, table in zip(model.resolutions, model.tables):
        blended = None
        for (vx, vz), weight in bilinear_corners(coords, resolution):
            term = mul(gather_rows(table, hash_index(vx, vz, table_size)), weight)
            blended = term if blended is None else add(blended, term)
        features.append(blended)
    return concat_cols(features)


def field_eval(coord: Sequence[float], model: InrModel) -> Tensor:
    """Scalar echogenicity at one normalized coordinate (0-D tensor)"""
    return reshape(model.forward(np.asarray(coord, dtype=np.float64)), ())


def fine_coordinates(spec: SamplingSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Normalized sample positions of the oversampled grid, row-major (N, 2)

    With jitter each sample moves uniformly within its own subcell.
    """
    rows, cols = spec.fine_shape
    q, p = np.meshgrid(np.arange(cols), np.arange(rows))
    x = q.reshape(-1) + 0.5
    z = p.reshape(-1) + 0.5
    if spec.jitter:
        rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
        offsets = rng.uniform(-0.5, 0.5, size=(2, x.size))
        x = x + offsets[0]
        z = z + offsets[1]
    coords = np.stack([x / cols, z / rows], axis=1)
    return np.clip(coords, 0.0, 1.0)


def sample_grid(
    model: InrModel, spec: SamplingSpec, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """
    Evaluate the field on the oversampled grid

    Args:
        model: Field to sample
        spec: Grid description; spacing of the result is (dx / o, dz / o)
        rng: Jitter source, fresh offsets on every call

    Returns:
        Tensor of shape (rows * o, cols * o)
    """
    values = model.forward(fine_coordinates(spec, rng))
    return reshape(values, spec.fine_shape)


def estimate_map(model: InrModel, spec: SamplingSpec) -> Image2D:
    """Pixel-resolution echogenicity estimate: un-jittered samples averaged per pixel"""
    fixed = spec.model_copy(update={"jitter": False})
    pooled = avg_pool(sample_grid(model, fixed), spec.oversample)
    return Image2D(pooled.value.copy(), spec.dx, spec.dz)
