"""Dataclass configs and strict JSON loading (unknown keys are an error)."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale setup used by the tests; ``paper_scale()``
    builds the full-size configuration.
    """

    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 3
    d_model: int = 64
    depth: int = 4
    d_state: int = 8
    conv_width: int = 4
    decoder_dim: int = 32
    n_heads: int = 2
    bidirectional: bool = True
    input_mask: bool = True
    cross_attn_symmetric: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.decoder_dim % self.n_heads != 0:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.decoder_dim % 4 != 0:
            raise ConfigError("decoder_dim must be divisible by 4 (x/y sin/cos split)")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError("patch_size must be a power of two (stride-2 conv stacks)")
        for name in ("image_size", "patch_size", "d_model", "d_state", "conv_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def d_inner(self) -> int:
        return 2 * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.d_model / 16))

    @property
    def upscale_stages(self) -> int:
        return int(math.log2(self.patch_size))

    @classmethod
    def paper_scale(cls, d_model: int = 768, depth: int = 24) -> "ModelConfig":
        return cls(
            image_size=512,
            patch_size=16,
            d_model=d_model,
            depth=depth,
            d_state=16,
            decoder_dim=256,
            n_heads=8,
        )


@dataclass
class LossConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    focal_alpha_t: float = 0.25
    eps: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be >= 0")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train_fraction < 1 and 0 < self.val_fraction < 1):
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction > 1:
            raise ConfigError("split fractions sum to more than 1")


@dataclass
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    max_degrees: float = 15.0
    cutout: bool = True


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    jitter_scale: float = 0.05
    prompts_per_sample: int = 1
    eval_every: int = 1
    max_steps: int | None = None
    target_train_dice: float | None = None
    zero_prompts: bool = False
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prompts_per_sample < 1:
            raise ConfigError("prompts_per_sample must be >= 1")


_NESTED = {"model": ModelConfig, "loss": LossConfig, "split": SplitSpec, "augment": AugmentConfig}


def _from_dict(cls, payload: dict[str, Any]):
    if not isinstance(payload, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if cls is TrainConfig and key in _NESTED:
            kwargs[key] = _from_dict(_NESTED[key], value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from_dict(payload: dict[str, Any]) -> TrainConfig:
    return _from_dict(TrainConfig, payload)


def model_config_from_dict(payload: dict[str, Any]) -> ModelConfig:
    return _from_dict(ModelConfig, payload)


def load_train_config(path: str | Path) -> TrainConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return train_config_from_dict(payload)


def config_to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
