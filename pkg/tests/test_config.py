"""
Unit tests for configuration loading
"""

from pathlib import Path

import pytest

from echoinr.config import (
    RunConfig,
    RuntimeSettings,
    dump_model,
    get_default_config,
    load_config,
    load_phantom_spec,
    load_psf,
)
from echoinr.errors import ConfigError
from echoinr.phantom import wire_phantom_spec
from echoinr.psf import PsfParams

REPO_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_default_config():
    """Defaults match the documented values"""
    config = get_default_config()
    assert config.psf.center_frequency == 8.0
    assert config.hash_grid.levels == 15
    assert config.train.iterations == 5000
    assert config.loss.ssim_weight == 0.5
    assert config.rl.iterations == 30


def test_shipped_config_files_validate():
    """Every YAML under configs/ loads"""
    config = load_config(REPO_CONFIGS / "config.yaml")
    assert config == RunConfig.model_validate(config.model_dump())
    assert load_psf(REPO_CONFIGS / "psf.yaml") == PsfParams()
    for name in ("wires", "inclusions", "cirs"):
        assert load_phantom_spec(REPO_CONFIGS / "phantoms" / f"{name}.yaml").shape[0] > 0


def test_missing_default_falls_back(tmp_path, monkeypatch):
    """Without configs/config.yaml the defaults are used"""
    monkeypatch.chdir(tmp_path)
    assert load_config() == get_default_config()


def test_missing_explicit_file(tmp_path):
    """An explicitly named file must exist"""
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")


def test_unknown_key_cites_line(tmp_path):
    """Typos are rejected with the file line of the offending key"""
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 3\ntrain:\n  iterations: 10\n  learnin_rate: 0.1\n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    message = str(excinfo.value)
    assert f"{path}:4:" in message
    assert "train.learnin_rate" in message


def test_invalid_value_cites_line(tmp_path):
    """Out-of-range values point at their line"""
    path = tmp_path / "bad.yaml"
    path.write_text("psf:\n  f_number: 2.0\n  center_frequency: -1\n")
    with pytest.raises(ConfigError, match=r"bad\.yaml:3: psf\.center_frequency"):
        load_config(path)


def test_yaml_syntax_error_cites_line(tmp_path):
    """Parse errors carry the line of the problem"""
    path = tmp_path / "broken.yaml"
    path.write_text("psf:\n  f_number: 2.0\n  n_cycles: [1, 2\n")
    with pytest.raises(ConfigError, match=r"broken\.yaml:\d+"):
        load_config(path)


def test_top_level_must_be_mapping(tmp_path):
    """A YAML list is not a config"""
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_psf_file_forms(tmp_path):
    """PSF files may hold bare fields or a psf section"""
    bare = tmp_path / "bare.yaml"
    bare.write_text("f_number: 3.0\n")
    assert load_psf(bare).f_number == 3.0

    params = PsfParams(f_number=1.5, n_cycles=3)
    nested = tmp_path / "nested.yaml"
    dump_model(params, nested, section="psf")
    assert load_psf(nested) == params


def test_phantom_spec_round_trip(tmp_path):
    """A dumped phantom spec loads back unchanged"""
    spec = wire_phantom_spec(seed=5)
    path = tmp_path / "wires.yaml"
    dump_model(spec, path)
    assert load_phantom_spec(path) == spec


def test_runtime_settings_from_env(monkeypatch):
    """ECHOINR_ variables override logging settings"""
    monkeypatch.setenv("ECHOINR_LOG_LEVEL", "DEBUG")
    assert RuntimeSettings().log_level == "DEBUG"
