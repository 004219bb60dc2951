"""
Configuration models and YAML loading.

Config files are YAML with optional sections ``model``, ``train``, ``sample``,
``data``, ``eval`` and ``ablate``; each section is a flat ``key: value`` mapping
(``model.placement`` and ``model.codec`` may be nested mappings).
"""
import hashlib
import json
import logging
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.errors import ArgumentError, ConfigError

logger = logging.getLogger(__name__)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CodecConfig(_Config):
    temporal_stride: int = 2
    spatial_stride: int = 4

    @field_validator("temporal_stride", "spatial_stride")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("strides must be >= 1")
        return v

    @property
    def latent_channels(self):
        return 3 * self.temporal_stride * self.spatial_stride ** 2


class PlacementSpec(_Config):
    strategy: Literal["continuous_first", "distributed_even", "explicit"] = "distributed_even"
    k: Optional[int] = 4
    indices: Optional[List[int]] = None

    @model_validator(mode="after")
    def _check_fields(self):
        if self.strategy == "explicit":
            if not self.indices:
                raise ValueError("explicit placement needs a non-empty index list")
        elif self.k is None or self.k < 1:
            raise ValueError(f"{self.strategy} placement needs k >= 1")
        return self


def resolve_placement(spec, layers, k=None):
    """
    Resolve a placement into the sorted list of main-block indices that get a context block

    continuous_first(k) -> [0, ..., k-1]
    distributed_even(k) -> [round(i * L / k) for i in range(k)]
    explicit(list)      -> the list, validated
    """
    if spec.strategy == "explicit":
        indices = list(spec.indices)
        if len(set(indices)) != len(indices):
            raise ArgumentError(f"explicit placement has duplicate indices: {indices}")
        if any(i < 0 or i >= layers for i in indices):
            raise ArgumentError(f"explicit placement indices {indices} outside [0, {layers})")
        return sorted(indices)
    k = spec.k if k is None else k
    if not 1 <= k <= layers:
        raise ArgumentError(f"placement needs 1 <= k <= L, got k={k}, L={layers}")
    if spec.strategy == "continuous_first":
        return list(range(k))
    # exact integer round-half-up of i*L/k; spacing L/k >= 1 keeps indices distinct
    return [(2 * i * layers + k) // (2 * k) for i in range(k)]


class ModelConfig(_Config):
    layers: int = 8
    model_dim: int = 128
    heads: int = 4
    patch: Tuple[int, int, int] = (1, 2, 2)
    text_buckets: int = 256
    max_text_tokens: int = 16
    mlp_ratio: int = 4
    mode: Literal["fullft", "adapter"] = "adapter"
    placement: PlacementSpec = PlacementSpec()
    codec: CodecConfig = CodecConfig()
    concept_decouple: bool = True
    init_std: float = 0.02

    @model_validator(mode="after")
    def _check_shape(self):
        if self.layers < 1 or self.model_dim < 1 or self.heads < 1:
            raise ValueError("layers, model_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if any(p < 1 for p in self.patch):
            raise ValueError(f"patch sizes must be positive, got {self.patch}")
        if self.mode == "adapter":
            try:
                resolve_placement(self.placement, self.layers)
            except ArgumentError as e:
                raise ValueError(str(e))
        return self

    @property
    def pad_id(self):
        return self.text_buckets

    @property
    def context_layers(self):
        if self.mode != "adapter":
            return []
        return resolve_placement(self.placement, self.layers)


class TrainConfig(_Config):
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    steps: int = 2000
    batch_size: int = 4
    p_zero: float = 0.1
    shift: float = 3.0
    seed: int = 0
    eval_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_accum_steps: int = 1
    grad_clip: Optional[float] = None
    time_sampling: Literal["uniform", "logit_normal"] = "uniform"
    on_invalid: Literal["skip", "abort"] = "abort"
    base_steps: int = 0
    base_learning_rate: float = 3e-4
    val_per_task: int = 50

    @model_validator(mode="after")
    def _check_ranges(self):
        if not 0.0 <= self.p_zero <= 1.0:
            raise ValueError(f"p_zero must be in [0, 1], got {self.p_zero}")
        if self.shift < 1.0:
            raise ValueError(f"shift must be >= 1, got {self.shift}")
        if self.learning_rate <= 0 or self.base_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 0 or self.base_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        return self


class SampleConfig(_Config):
    steps: int = 40
    guide_scale: float = 3.0
    seed: int = 0
    composite_inactive: bool = False
    shift_grid: bool = False
    shift: float = 3.0
    context_scale: float = 1.0

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guide_scale < 0:
            raise ValueError(f"guide_scale must be >= 0, got {self.guide_scale}")
        if self.shift < 1.0:
            raise ValueError(f"shift must be >= 1, got {self.shift}")
        return self


class Geometry(_Config):
    frames: int = 8
    height: int = 32
    width: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 3
    max_size: int = 7

    @model_validator(mode="after")
    def _check_ranges(self):
        if min(self.frames, self.height, self.width) < 1:
            raise ValueError("frames, height and width must be positive")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        return self


class EvalConfig(_Config):
    eval_times: Tuple[float, ...] = (0.25, 0.5, 0.75)
    max_sampled: int = 8
    sample: SampleConfig = SampleConfig(steps=20)
    seed: int = 0


class AblationConfig(_Config):
    axis: Literal["structure", "placement", "decouple", "shift", "pzero", "weighting"] = "structure"
    seeds: int = 1
    steps: int = 200
    train_count: int = 256
    val_per_task: int = 10
    tasks: Optional[List[str]] = None
    placement_k: Optional[List[int]] = None
    n_jobs: int = 1

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.seeds < 1:
            raise ValueError(f"seeds must be >= 1, got {self.seeds}")
        if self.steps < 0 or self.train_count < 1 or self.val_per_task < 1:
            raise ValueError("steps must be >= 0, train_count and val_per_task >= 1")
        return self


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "data": Geometry,
    "eval": EvalConfig,
    "ablate": AblationConfig,
}


def load_config(path):
    """
    Load a YAML config file into validated config models

    Returns:
    --------
    dict mapping section name -> config model (defaults for missing sections)
    """
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections in {path}: {sorted(unknown)}")
    return {name: build_config(cls, raw.get(name) or {}, source=f"{path}:{name}") for name, cls in _SECTIONS.items()}


def build_config(cls, values, source="config"):
    try:
        return cls.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid {source}: {e}") from e


def config_digest(*configs):
    payload = [c.model_dump(mode="json") for c in configs]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def default_configs():
    return {name: cls() for name, cls in _SECTIONS.items()}
