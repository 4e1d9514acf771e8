"""
Checkpoint and fused-model storage.

A checkpoint is a directory holding manifest.json and one raw little-endian
payload file per tensor:

    manifest.json   {"kind": "checkpoint", "format_version": 1,
                     "config": {...}, "model": {...},
                     "tensors": {"block0.conv.weight": {"file": ..., "shape": [...], "dtype": "<f4"}, ...}}
    block0.conv.weight.bin
    ...

A fused model uses the same layout with kind "fused" and an extra
"fused_layers" entry mapping each RepAct layer to its piecewise polynomial
document.  The multi-branch tensors are copied through so the fused form
can always be checked against its source.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import configuration
from . import piecewise
from .errors import CheckpointError, ValidationError
from .experiment import ExperimentConfig
from .model import TinyCNN

logger = configuration.logger

MANIFEST = "manifest.json"
KIND_CHECKPOINT = "checkpoint"
KIND_FUSED = "fused"
PAYLOAD_DTYPES = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class Checkpoint:
    config: dict
    model: dict
    state: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, config, **metadata):
        config = config.to_dict() if isinstance(config, ExperimentConfig) else dict(config)
        return cls(config, model.description(), model.state(), metadata)

    def experiment_config(self):
        return ExperimentConfig.from_dict(self.config)

    def build_model(self):
        """TinyCNN with the stored topology and parameter values (shape-checked)."""
        model = TinyCNN.from_description(self.model)
        model.load_state(self.state)
        return model


@dataclass
class FusedModel(Checkpoint):
    layers: dict = field(default_factory=dict)   # layer name -> PiecewisePoly


# -----------------------------------------------------------------------------
# Writing
# -----------------------------------------------------------------------------

def _payload_dtype(array):
    if array.dtype == np.float64:
        return "<f8"
    if array.dtype == np.float32:
        return "<f4"
    raise CheckpointError(f"unsupported tensor dtype {array.dtype}")


def _write_directory(directory, manifest, state):
    os.makedirs(directory, exist_ok=True)
    tensors = {}
    for name, array in state.items():
        array = np.asarray(array)
        code = _payload_dtype(array)
        filename = f"{name}.bin"
        with open(os.path.join(directory, filename), "wb") as f:
            f.write(np.ascontiguousarray(array, dtype=code).tobytes())
        tensors[name] = {"file": filename, "shape": list(array.shape), "dtype": code}
    manifest["tensors"] = tensors
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2)


def save_checkpoint(checkpoint, directory):
    manifest = {
        "kind": KIND_CHECKPOINT,
        "format_version": configuration.CHECKPOINT_FORMAT_VERSION,
        "config": checkpoint.config,
        "model": checkpoint.model,
        "metadata": checkpoint.metadata,
    }
    _write_directory(directory, manifest, checkpoint.state)
    logger.info(f"Checkpoint saved to {directory} ({len(checkpoint.state)} tensors)")
    return directory


def fuse_checkpoint(checkpoint):
    """Replace every RepAct layer by its fused PiecewisePoly."""
    model = checkpoint.build_model()
    layers = model.fused_polys()
    for name, poly in layers.items():
        logger.info(f"Fused {name}: breakpoints {list(poly.breakpoints)}, segments {list(poly.segments)}")
    return FusedModel(checkpoint.config, checkpoint.model, checkpoint.state, dict(checkpoint.metadata), layers)


def save_fused(fused, directory):
    manifest = {
        "kind": KIND_FUSED,
        "format_version": configuration.CHECKPOINT_FORMAT_VERSION,
        "config": fused.config,
        "model": fused.model,
        "metadata": fused.metadata,
        "fused_layers": {name: piecewise.poly_to_document(poly) for name, poly in fused.layers.items()},
    }
    _write_directory(directory, manifest, fused.state)
    logger.info(f"Fused model saved to {directory} ({len(fused.layers)} RepAct layers)")
    return directory


# -----------------------------------------------------------------------------
# Reading
# -----------------------------------------------------------------------------

def _read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    with open(path) as f:
        text = f.read()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != configuration.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r}")
    return manifest


def _read_tensors(directory, manifest):
    state = {}
    for name, entry in manifest.get("tensors", {}).items():
        try:
            dtype = PAYLOAD_DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            filename = entry["file"]
        except KeyError as e:
            raise CheckpointError(f"tensor {name}: manifest entry missing {e}") from e
        with open(os.path.join(directory, filename), "rb") as f:
            data = f.read()
        expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if len(data) != expected:
            raise CheckpointError(f"tensor {name}: payload has {len(data)} bytes, expected {expected}")
        state[name] = np.frombuffer(data, dtype=entry["dtype"]).astype(dtype).reshape(shape)
    return state


def load_checkpoint(directory):
    manifest = _read_manifest(directory)
    if manifest.get("kind") == KIND_FUSED:
        raise ValidationError(f"{directory} holds a fused model; it cannot be fused or trained again")
    if manifest.get("kind") != KIND_CHECKPOINT:
        raise CheckpointError(f"{directory}: unknown document kind {manifest.get('kind')!r}")
    return Checkpoint(manifest["config"], manifest["model"], _read_tensors(directory, manifest),
                      manifest.get("metadata", {}))


def load_fused(directory):
    manifest = _read_manifest(directory)
    if manifest.get("kind") != KIND_FUSED:
        raise ValidationError(f"{directory} is not a fused model (kind {manifest.get('kind')!r})")
    layers = {name: piecewise.poly_from_document(doc) for name, doc in manifest.get("fused_layers", {}).items()}
    return FusedModel(manifest["config"], manifest["model"], _read_tensors(directory, manifest),
                      manifest.get("metadata", {}), layers)


def load_any(directory):
    """Checkpoint or FusedModel, whichever the manifest declares."""
    if _read_manifest(directory).get("kind") == KIND_FUSED:
        return load_fused(directory)
    return load_checkpoint(directory)
