"""
Utility functions for echoinr
"""

import json
import logging
import os
import secrets
import zipfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from echoinr.model import HashGridConfig, InrModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
# fixed member timestamp so identical checkpoints are identical files
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure root logging once per process

    Args:
        level: Level name (DEBUG, INFO, ...)
        log_file: Optional file receiving the same records as stderr
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


def resolve_seed(seed: Optional[int]) -> int:
    """Return the given seed, or draw and log a fresh one so the run can be replayed"""
    if seed is None:
        seed = secrets.randbits(32)
        logger.info("No --seed given; using random seed %d", seed)
    return int(seed)


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for stream ``index`` of a run seeded with ``seed``"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def parse_range(text: str, integer: bool = False) -> List[float]:
    """
    Parse an inclusive 'start:stop[:step]' range

    Args:
        text: e.g. '1.0:4.0:0.5' or '1:5'
        integer: Return ints (step defaults to 1)

    Returns:
        Values from start to stop inclusive
    """
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"Range must look like start:stop[:step], got {text!r}")
    start, stop = float(parts[0]), float(parts[1])
    step = float(parts[2]) if len(parts) == 3 else 1.0
    if step <= 0:
        raise ValueError(f"Range step must be positive, got {step}")
    if stop < start:
        raise ValueError(f"Empty range {text!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    values = np.round(start + step * np.arange(count), 10)
    if integer:
        return [int(round(v)) for v in values]
    return [float(v) for v in values]


def write_npz(path: str, arrays: Dict[str, np.ndarray]) -> None:
    """
    Write an uncompressed .npz readable by np.load, byte-identical for identical arrays

    np.savez stamps every member with the current time; here members carry a fixed
    timestamp and appear in insertion order.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, array in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=ZIP_EPOCH)
            with archive.open(info, "w", force_zip64=True) as member:
                np.lib.format.write_array(member, np.asarray(array), allow_pickle=False)


def save_model(model: InrModel, path: str, metadata: Optional[Dict] = None):
    """
    Save model checkpoint

    Layout (numpy .npz, no pickled objects):
        format_version  int64 scalar
        config_json     uint8 bytes of the HashGridConfig as JSON
        metadata_json   uint8 bytes of the metadata dict as JSON
        table_<l>       (T, F) little-endian float64, one per level
        weight_<k>      (out, in) little-endian float64, one per dense layer
        bias_<k>        (out,) little-endian float64

    Args:
        model: INR model
        path: Save path
        metadata: Optional metadata to save with model
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    arrays = {name: np.asarray(value, dtype="<f8") for name, value in model.named_arrays().items()}
    config_json = model.config.model_dump_json().encode("utf-8")
    metadata_json = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    write_npz(
        path,
        {
            "format_version": np.array(CHECKPOINT_FORMAT_VERSION, dtype="<i8"),
            "config_json": np.frombuffer(config_json, dtype=np.uint8),
            "metadata_json": np.frombuffer(metadata_json, dtype=np.uint8),
            **arrays,
        },
    )
    logger.info("Model saved to %s", path)


def load_model(path: str) -> Tuple[InrModel, Dict[str, Any]]:
    """
    Load model checkpoint

    Args:
        path: Path to checkpoint

    Returns:
        Loaded model and metadata
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Model file not found: {path}")

    with np.load(path, allow_pickle=False) as checkpoint:
        version = int(checkpoint["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        config = HashGridConfig.model_validate_json(checkpoint["config_json"].tobytes())
        metadata = json.loads(checkpoint["metadata_json"].tobytes().decode("utf-8"))
        arrays = {key: checkpoint[key] for key in checkpoint.files if key[0] in "tbw"}

    model = InrModel(config, seed=0)
    model.load_arrays(arrays)
    return model, metadata


def count_parameters(model: InrModel) -> int:
    """
    Count the number of trainable parameters in a model

    Args:
        model: INR model

    Returns:
        Number of trainable parameters
    """
    return sum(p.size for p in model.parameters() if p.requires_grad)


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def format_time(seconds: float) -> str:
    """
    Format seconds into human-readable time

    Args:
        seconds: Time in seconds

    Returns:
        Formatted time string
    """
    hours = int(seconds // 3600)
    minutes = int((seconds % 3600) // 60)
    secs = int(seconds % 60)

    if hours > 0:
        return f"{hours}h {minutes}m {secs}s"
    elif minutes > 0:
        return f"{minutes}m {secs}s"
    else:
        return f"{secs}s"


class AverageMeter:
    """Computes and stores the average and current value"""

    def __init__(self):
        self.reset()

    def reset(self):
        self.val = 0
        self.avg = 0
        self.sum = 0
        self.count = 0

    def update(self, val, n=1):
        self.val = val
        self.sum += val * n
        self.count += n
        self.avg = self.sum / self.count
