"""
Weight persistence: manifest.json plus one little-endian float64 buffer per tensor.
"""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from offroad_planner.errors import DomainError
from offroad_planner.seqmodel.types import ModelConfig, ModelWeights, check_manifest

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DTYPE = np.dtype("<f8")


def save_weights(weights: ModelWeights, directory: Union[str, Path]) -> Path:
    """Write weights into directory (created if needed); returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in weights.tensors.items():
        filename = f"{name}.f64"
        (directory / filename).write_bytes(np.ascontiguousarray(tensor, dtype=DTYPE).tobytes())
        entries.append({"name": name, "shape": list(tensor.shape), "file": filename})
    manifest = {
        "architecture": weights.architecture,
        "config": weights.config.to_dict(),
        "seed": weights.seed,
        "training": weights.training,
        "tensors": entries,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"Saved {len(entries)} tensors to {directory}")
    return path


def load_weights(directory: Union[str, Path]) -> ModelWeights:
    """
    Read weights written by save_weights.

    Raises:
        FileNotFoundError: If the manifest or a tensor file is missing
        DomainError: If a buffer size or the manifest disagrees with the architecture
    """
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    config = ModelConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype=DTYPE)
        if raw.size != int(np.prod(shape)):
            raise DomainError(f"Tensor {entry['name']} has {raw.size} values, manifest says {shape}")
        tensors[entry["name"]] = raw.astype(np.float64).reshape(shape)
    weights = ModelWeights(config=config, tensors=tensors, seed=int(manifest["seed"]), training=manifest.get("training", {}))
    check_manifest(weights)
    return weights
