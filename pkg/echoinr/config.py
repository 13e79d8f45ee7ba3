"""
Configuration loading: YAML files validated into pydantic models

Unknown keys are rejected everywhere. Parse and validation errors cite the
file and line so typos are easy to find.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from echoinr.errors import ConfigError
from echoinr.losses import LossWeights
from echoinr.model import HashGridConfig
from echoinr.phantom import PhantomSpec
from echoinr.psf import PsfParams
from echoinr.rl import RlConfig
from echoinr.train import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "configs/config.yaml"

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


class IoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_dir: str = "outputs"
    preview: bool = False


class MonitoringConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    log_level: str = "INFO"
    log_file: Optional[str] = None


class RunConfig(BaseModel):
    """Everything one command needs, merged from the config file and flags"""

    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = None
    psf: PsfParams = Field(default_factory=PsfParams)
    hash_grid: HashGridConfig = Field(default_factory=HashGridConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    rl: RlConfig = Field(default_factory=RlConfig)
    phantom: Optional[PhantomSpec] = None
    io: IoConfig = Field(default_factory=IoConfig)
    monitoring: MonitoringConfig = Field(default_factory=MonitoringConfig)


class RuntimeSettings(BaseSettings):
    """Environment overrides (ECHOINR_LOG_LEVEL, ECHOINR_LOG_FILE), also read from .env"""

    model_config = SettingsConfigDict(env_prefix="ECHOINR_", env_file=".env", extra="ignore")

    log_level: Optional[str] = None
    log_file: Optional[str] = None


def _line_of(node: Optional[yaml.Node], loc) -> Optional[int]:
    """1-based line of the YAML node addressed by a pydantic error location"""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(key)), None)
            key_node = next((k for k, v in node.value if k.value == str(key)), None)
            if match is None:
                break
            line = key_node.start_mark.line + 1
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def read_yaml(path: PathLike) -> Dict[str, Any]:
    """
    Parse a YAML mapping

    Args:
        path: File path

    Returns:
        Parsed mapping (empty for an empty file)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: expected a mapping at the top level")
    return data


def validate_file(
    path: PathLike, model: Type[ModelT], data: Optional[Dict[str, Any]] = None
) -> ModelT:
    """
    Validate a YAML file into a pydantic model, citing lines on failure

    Args:
        path: Source file (also used to locate errors)
        model: Target model class
        data: Already-parsed content (read from path when omitted)

    Returns:
        Validated model instance
    """
    data = read_yaml(path) if data is None else data
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        root = yaml.compose(Path(path).read_text())
        problems = []
        for error in exc.errors():
            loc = tuple(error["loc"])
            line = _line_of(root, loc)
            key = ".".join(str(part) for part in loc) or "<root>"
            problems.append(f"{path}:{line}: {key}: {error['msg']}")
        raise ConfigError("\n".join(problems)) from None


def get_default_config() -> RunConfig:
    """
    Get default configuration

    Returns:
        Default RunConfig
    """
    return RunConfig()


def load_config(config_path: Optional[PathLike] = None) -> RunConfig:
    """
    Load configuration from YAML file

    The default path may be missing (defaults are used); an explicit path must exist.

    Args:
        config_path: Path to config file

    Returns:
        RunConfig
    """
    if config_path is None:
        if not os.path.exists(DEFAULT_CONFIG_PATH):
            logger.warning("Config file not found at %s, using defaults", DEFAULT_CONFIG_PATH)
            return get_default_config()
        config_path = DEFAULT_CONFIG_PATH
    return validate_file(config_path, RunConfig)


def load_psf(path: PathLike) -> PsfParams:
    """PSF parameters from a file holding either bare fields or a ``psf:`` section"""
    data = read_yaml(path)
    if set(data) == {"psf"}:
        data = data["psf"]
        config = validate_file(path, RunConfig, {"psf": data})
        return config.psf
    return validate_file(path, PsfParams, data)


def load_phantom_spec(path: PathLike) -> PhantomSpec:
    """Phantom description from a file holding either bare fields or a ``phantom:`` section"""
    data = read_yaml(path)
    if set(data) == {"phantom"}:
        config = validate_file(path, RunConfig, data)
        return config.phantom
    return validate_file(path, PhantomSpec, data)


def dump_model(model: BaseModel, path: PathLike, section: Optional[str] = None) -> None:
    """Write a pydantic model as YAML, optionally nested under one section key"""
    data = model.model_dump(mode="json")
    if section:
        data = {section: data}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=False)
