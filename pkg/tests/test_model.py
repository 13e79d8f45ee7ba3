"""
Unit tests for the hash-grid INR model
"""

import math

import numpy as np
import pytest

from echoinr.errors import DomainError
from echoinr.model import (
    HashGridConfig,
    InrModel,
    SamplingSpec,
    bilinear_corners,
    encode,
    estimate_map,
    field_eval,
    fine_coordinates,
    hash_index,
    sample_grid,
)
from echoinr.tensorgraph import Tensor, avg_pool, grad_check, mean, square, sub, sum_
from echoinr.utils import count_parameters, load_model, save_model


def _hand_model():
    """Two levels (2 and 4 cells per axis), 16-entry tables holding known values"""
    config = HashGridConfig(
        levels=2, table_size=16, base_resolution=2, max_resolution=4, hidden_width=4
    )
    model = InrModel(config, seed=0)
    model.tables[0].value = np.arange(16.0).reshape(16, 1)
    model.tables[1].value = 10.0 * np.arange(16.0).reshape(16, 1)
    return model


def _randomize(model, rng):
    """Move tables and biases away from zero so no ReLU sits at its kink"""
    for tensor in model.tables + model.biases:
        tensor.value = rng.normal(scale=0.5, size=tensor.shape)
    model.weights[-1].value = rng.normal(size=model.weights[-1].shape)


def test_hash_known_values():
    """Hash of a few vertices in a 2^18 table"""
    assert int(hash_index(0, 0, 2**18)) == 0
    assert int(hash_index(1, 0, 2**18)) == 1
    assert int(hash_index(0, 1, 2**18)) == 227761


def test_hash_stays_in_table(rng):
    """Indices of large vertex coordinates stay in [0, T)"""
    vx = rng.integers(0, 2**20, size=1000)
    vz = rng.integers(0, 2**20, size=1000)
    idx = hash_index(vx, vz, 2**12)
    assert idx.min() >= 0 and idx.max() < 2**12


def test_table_size_must_be_power_of_two():
    """Non power-of-two tables are rejected"""
    with pytest.raises(ValueError):
        HashGridConfig(table_size=1000)


def test_resolutions_span_base_to_max():
    """Geometric progression from N_min to N_max"""
    config = HashGridConfig(levels=5, base_resolution=16).for_grid(256, 200)
    resolutions = config.resolutions()
    assert resolutions[0] == 16
    assert resolutions[-1] == 256
    assert resolutions == sorted(resolutions)


def test_for_grid_keeps_explicit_max():
    """An explicit max_resolution wins over the grid size"""
    config = HashGridConfig(max_resolution=64)
    assert config.for_grid(512, 512).max_resolution == 64


def test_bilinear_weights_partition_unity(rng):
    """Corner weights are non-negative and sum to one"""
    coords = rng.uniform(size=(500, 2))
    coords[:3] = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]]
    corners = bilinear_corners(coords, 7)
    total = sum(weight for _, weight in corners)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert all(np.all(weight >= 0) for _, weight in corners)


def test_encoding_hand_computed():
    """Blended features at (0.3, 0.6) for known table contents"""
    features = encode([0.3, 0.6], _hand_model()).value
    np.testing.assert_allclose(features, [[0.84, 21.6]], atol=1e-12)


def test_encoding_at_vertex_reads_one_entry():
    """A coordinate on a vertex of the fine level returns that vertex's entry"""
    model = _hand_model()
    # (0.5, 0.25) is vertex (2, 1) at 4 cells per axis; hash 2 ^ 1 = 3
    features = encode([0.5, 0.25], model).value
    assert features[0, 1] == pytest.approx(30.0)


def test_encode_rejects_out_of_domain():
    """Coordinates outside the unit square are a domain error"""
    with pytest.raises(DomainError):
        encode([[1.2, 0.5]], _hand_model())


def test_initial_field_is_ln2(tiny_grid):
    """Zero output layer gives softplus(0) everywhere"""
    model = InrModel(tiny_grid.for_grid(32, 32), seed=3)
    value = field_eval([0.4, 0.7], model)
    assert value.shape == ()
    assert float(value.value) == pytest.approx(math.log(2.0), abs=1e-15)


def test_parameter_count(tiny_grid):
    """Tables plus dense layers"""
    config = tiny_grid.for_grid(32, 32)
    model = InrModel(config)
    tables = config.levels * config.table_size * config.features_per_entry
    width = config.hidden_width
    dense = (config.levels * width + width) + (width * width + width) + (width + 1)
    assert count_parameters(model) == tables + dense


def test_table_gradient(tiny_grid, rng):
    """Reverse-mode gradient wrt a hash table matches finite differences"""
    model = InrModel(tiny_grid.for_grid(16, 16), seed=1)
    _randomize(model, rng)
    coords = rng.uniform(size=(20, 2))
    target = rng.uniform(size=(20, 1))

    def loss(_):
        return mean(square(sub(model.forward(coords), target)))

    touched = np.unique(
        np.concatenate([hash_index(vx, vz, 2**10) for (vx, vz), _ in bilinear_corners(coords, 4)])
    )
    assert grad_check(loss, model.tables[0], h=1e-6, indices=touched, atol=1e-4) < 1e-5


def test_weight_gradient(tiny_grid, rng):
    """Reverse-mode gradient wrt the first dense layer"""
    model = InrModel(tiny_grid.for_grid(16, 16), seed=2)
    _randomize(model, rng)
    coords = rng.uniform(size=(10, 2))
    assert grad_check(lambda _: sum_(model.forward(coords)), model.weights[0], atol=1e-4) < 1e-5


def test_fine_coordinates_without_jitter():
    """Sample positions are subcell centers in row-major order"""
    spec = SamplingSpec(rows=2, cols=3, dx=0.1, dz=0.1, oversample=2, jitter=False)
    coords = fine_coordinates(spec)
    assert coords.shape == (24, 2)
    np.testing.assert_allclose(coords[0], [0.5 / 6, 0.5 / 4])
    np.testing.assert_allclose(coords[1], [1.5 / 6, 0.5 / 4])
    np.testing.assert_allclose(coords[6], [0.5 / 6, 1.5 / 4])


def test_jittered_coordinates_stay_in_subcell(rng):
    """Jitter moves each sample within its own subcell"""
    spec = SamplingSpec(rows=4, cols=4, dx=0.1, dz=0.1, oversample=2)
    fixed = fine_coordinates(spec.model_copy(update={"jitter": False}))
    jittered = fine_coordinates(spec, rng)
    assert np.all(np.abs(jittered - fixed) <= 0.5 / 8 + 1e-12)
    assert not np.allclose(jittered, fixed)


def test_pooled_linear_field_equals_pixel_centers():
    """Averaging 2x2 subcells of a linear field gives its value at the pixel center"""
    spec = SamplingSpec(rows=3, cols=5, dx=0.2, dz=0.1, oversample=2, jitter=False)
    coords = fine_coordinates(spec)
    field = (2.0 * coords[:, 0] - 0.5 * coords[:, 1] + 1.0).reshape(spec.fine_shape)
    pooled = avg_pool(Tensor(field), 2).value
    coarse = fine_coordinates(spec.model_copy(update={"oversample": 1}))
    expected = (2.0 * coarse[:, 0] - 0.5 * coarse[:, 1] + 1.0).reshape(3, 5)
    np.testing.assert_allclose(pooled, expected, atol=1e-12)


def test_sample_grid_and_estimate_shapes(tiny_grid):
    """Fine grid at o times the pixel count, estimate back at pixel resolution"""
    spec = SamplingSpec(rows=6, cols=8, dx=0.1, dz=0.1, oversample=2)
    model = InrModel(tiny_grid.for_grid(*spec.fine_shape))
    assert sample_grid(model, spec).shape == (12, 16)
    estimate = estimate_map(model, spec)
    assert estimate.shape == (6, 8)
    assert estimate.dx == pytest.approx(0.1)


def test_checkpoint_round_trip_is_bit_exact(tiny_grid, tmp_path, rng):
    """Saved parameters reload unchanged and give identical outputs"""
    model = InrModel(tiny_grid.for_grid(16, 16), seed=5)
    model.weights[-1].value = rng.normal(size=model.weights[-1].shape)
    path = str(tmp_path / "model.npz")
    save_model(model, path, {"iteration": 7})

    loaded, metadata = load_model(path)
    assert metadata == {"iteration": 7}
    assert loaded.config == model.config
    for name, array in model.named_arrays().items():
        np.testing.assert_array_equal(loaded.named_arrays()[name], array)
    coords = rng.uniform(size=(5, 2))
    np.testing.assert_array_equal(loaded.forward(coords).value, model.forward(coords).value)


def test_copy_is_independent(tiny_grid):
    """Copies do not share parameter storage"""
    model = InrModel(tiny_grid.for_grid(8, 8))
    clone = model.copy()
    clone.tables[0].value[0, 0] = 1.0
    assert model.tables[0].value[0, 0] != 1.0
