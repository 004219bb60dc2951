"""
Checkpoint persistence.

A checkpoint is a directory with ``manifest.json`` and one raw little-endian
float32 buffer per parameter (``params/<name>.f32``) and per optimizer moment
(``moments/<name>.m.f32``, ``moments/<name>.v.f32``).
"""
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from src import numerics as num
from src.config import ModelConfig, TrainConfig
from src.errors import CheckpointError, CheckpointVersionError
from src.model import ParamStore, param_shapes
from src.train import TrainState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    trainable: bool = True


class CheckpointManifest(BaseModel):
    version: int
    step: int = 0
    model: Dict[str, Any]
    train: Optional[Dict[str, Any]] = None
    rng: Optional[Dict[str, Any]] = None
    parameters: List[TensorEntry]
    moments: List[str] = []


@dataclass
class Checkpoint:
    params: ParamStore
    model_cfg: ModelConfig
    train_cfg: Optional[TrainConfig] = None
    step: int = 0
    rng_state: Optional[dict] = None
    moments: Optional[dict] = None

    def to_state(self):
        """Resume training: parameters, moments, step counter and generator state."""
        rng = num.rng_from_state(self.rng_state) if self.rng_state else num.make_rng(0, "train")
        return TrainState(params=self.params, moments=dict(self.moments or {}), step=self.step, rng=rng)


def _write_buffer(path, array):
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_buffer(path, shape, label):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"missing buffer for {label}: {e}") from e
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise CheckpointError(f"buffer for {label} has {len(data)} bytes, expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)


def save(state, path, model_cfg, train_cfg=None):
    """
    Write a checkpoint directory

    Parameters:
    -----------
    state : TrainState or ParamStore
    path : str
    model_cfg : ModelConfig
    train_cfg : TrainConfig or None
    """
    params = state.params if isinstance(state, TrainState) else state
    moments = state.moments if isinstance(state, TrainState) else {}
    try:
        os.makedirs(os.path.join(path, "params"), exist_ok=True)
        os.makedirs(os.path.join(path, "moments"), exist_ok=True)
        for folder in ("params", "moments"):
            for name in os.listdir(os.path.join(path, folder)):
                os.remove(os.path.join(path, folder, name))
        for name in params.names():
            _write_buffer(os.path.join(path, "params", f"{name}.f32"), params[name])
        for name, (m, v) in sorted(moments.items()):
            _write_buffer(os.path.join(path, "moments", f"{name}.m.f32"), m)
            _write_buffer(os.path.join(path, "moments", f"{name}.v.f32"), v)
        manifest = CheckpointManifest(
            version=FORMAT_VERSION,
            step=state.step if isinstance(state, TrainState) else 0,
            model=model_cfg.model_dump(mode="json"),
            train=train_cfg.model_dump(mode="json") if train_cfg is not None else None,
            rng=num.rng_state(state.rng) if isinstance(state, TrainState) else None,
            parameters=[TensorEntry(name=n, shape=list(params[n].shape), trainable=params.trainable[n])
                        for n in params.names()],
            moments=sorted(moments),
        )
        with open(os.path.join(path, MANIFEST), "w") as f:
            f.write(manifest.model_dump_json(indent=2))
    except OSError as e:
        logger.error(f"Error saving checkpoint to {path}: {str(e)}")
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")


def load(path):
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"checkpoint not found: {manifest_path}")
    try:
        with open(manifest_path) as f:
            manifest = CheckpointManifest.model_validate_json(f.read())
    except ValidationError as e:
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: {e}") from e
    if manifest.version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {manifest.version}, this build reads version {FORMAT_VERSION}")

    try:
        model_cfg = ModelConfig.model_validate(manifest.model)
        train_cfg = TrainConfig.model_validate(manifest.train) if manifest.train is not None else None
    except ValidationError as e:
        raise CheckpointError(f"checkpoint {path} holds an invalid config: {e}") from e

    listed = {entry.name for entry in manifest.parameters}
    try:
        buffers = os.listdir(os.path.join(path, "params"))
    except OSError as e:
        raise CheckpointError(f"checkpoint {path} has no readable params directory: {e}") from e
    on_disk = {name[:-len(".f32")] for name in buffers if name.endswith(".f32")}
    unlisted = sorted(on_disk - listed)
    if unlisted:
        raise CheckpointError(f"buffers without manifest entries in {path}: {unlisted}")
    expected = param_shapes(model_cfg)
    if listed != set(expected):
        missing, extra = sorted(set(expected) - listed), sorted(listed - set(expected))
        raise CheckpointError(f"checkpoint {path} does not match its model config (missing {missing}, unexpected {extra})")

    tensors, trainable = {}, {}
    for entry in manifest.parameters:
        if tuple(entry.shape) != tuple(expected[entry.name]):
            raise CheckpointError(f"parameter {entry.name} has shape {tuple(entry.shape)}, expected {expected[entry.name]}")
        tensors[entry.name] = _read_buffer(os.path.join(path, "params", f"{entry.name}.f32"), entry.shape, entry.name)
        trainable[entry.name] = entry.trainable
    params = ParamStore(tensors, trainable)

    moments = {}
    for name in manifest.moments:
        if name not in tensors:
            raise CheckpointError(f"optimizer moments for unknown parameter {name}")
        shape = tensors[name].shape
        moments[name] = (_read_buffer(os.path.join(path, "moments", f"{name}.m.f32"), shape, f"{name} (first moment)"),
                         _read_buffer(os.path.join(path, "moments", f"{name}.v.f32"), shape, f"{name} (second moment)"))
    logger.info(f"Loaded checkpoint {path} at step {manifest.step}")
    return Checkpoint(params=params, model_cfg=model_cfg, train_cfg=train_cfg, step=manifest.step,
                      rng_state=manifest.rng, moments=moments)
