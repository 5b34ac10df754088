"""Configuration records for the model, prompts and training runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

LR_GRID = (50.0, 25.0, 10.0, 5.0, 2.5, 1.0, 0.5, 0.25, 0.1, 0.05)
WD_GRID = (0.01, 0.001, 0.0001, 0.0)
PRUNE_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class ConfigError(ValueError):
    pass


@dataclass
class PromptConfig:
    visual_len: int = 0
    kv_len: int = 0
    kv_placement: str = "before"
    kv_shared: bool = True
    init: str = "he"
    segments: int = 8

    def validate(self, embed_dim: int | None = None) -> None:
        if self.visual_len < 0 or self.kv_len < 0:
            raise ConfigError("prompt lengths must be non-negative")
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if self.kv_placement not in ("before", "after"):
            raise ConfigError(f"kv_placement must be 'before' or 'after', got {self.kv_placement!r}")
        if self.init not in ("he", "trunc_normal"):
            raise ConfigError(f"init must be 'he' or 'trunc_normal', got {self.init!r}")
        if embed_dim is not None and embed_dim % self.segments:
            raise ConfigError(f"embed_dim {embed_dim} is not divisible by segments {self.segments}")


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_mult: int = 2
    num_classes: int = 8
    prompt: PromptConfig = field(default_factory=PromptConfig)
    precision: int = 32
    seed: int = 0
    # "head": divide logits by sqrt(d / H); "model": by sqrt(d), literally as in the attention formula
    attn_scale: str = "head"

    def __post_init__(self):
        if isinstance(self.prompt, dict):
            self.prompt = PromptConfig(**self.prompt)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.attn_scale not in ("head", "model"):
            raise ConfigError("attn_scale must be 'head' or 'model'")
        if min(self.num_layers, self.num_heads, self.num_classes, self.channels, self.ffn_mult) < 1:
            raise ConfigError("layer/head/class/channel counts must be positive")
        self.prompt.validate(self.embed_dim)
        return self

    def replace(self, **changes) -> "ModelConfig":
        prompt_changes = changes.pop("prompt", None)
        cfg = dataclasses.replace(self, **changes)
        if isinstance(prompt_changes, dict):
            cfg.prompt = dataclasses.replace(self.prompt, **prompt_changes)
        elif prompt_changes is not None:
            cfg.prompt = prompt_changes
        else:
            cfg.prompt = dataclasses.replace(self.prompt)
        return cfg


@dataclass
class TrainConfig:
    base_lr: float = 0.5
    weight_decay: float = 0.0
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 64
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_grid: tuple = LR_GRID
    wd_grid: tuple = WD_GRID
    prune_ratio_grid: tuple = PRUNE_GRID
    prune_ratio: float = 0.5
    # None means: same as prune_ratio
    segment_ratio: float | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr_grid or not self.wd_grid or not self.prune_ratio_grid:
            raise ConfigError("hyperparameter grids must be non-empty")
        for r in (self.prune_ratio, self.effective_segment_ratio):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"pruning ratio {r} outside [0, 1]")
        return self

    @property
    def effective_segment_ratio(self) -> float:
        return self.prune_ratio if self.segment_ratio is None else self.segment_ratio

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def to_dict(obj) -> dict[str, Any]:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def from_dict(cls, data: dict, where: str = ""):
    """Build a dataclass from ``data``, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or cls.__name__}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is ModelConfig and k == "prompt":
            v = from_dict(PromptConfig, v, f"{where}.prompt" if where else "prompt")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)
