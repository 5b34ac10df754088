"""Trainable prompt parameters: per-layer visual prompts, key-value prompts, masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .config import ConfigError, ModelConfig, PromptConfig
from .tensor import Tensor, get_dtype, he_normal, make_rng, precision, trunc_normal

if TYPE_CHECKING:
    from .vit import PromptedViT

# independent RNG streams so changing one prompt length never shifts another's init
_VISUAL_STREAM, _KV_KEY_STREAM, _KV_VALUE_STREAM = 11, 12, 13


@dataclass
class PromptSet:
    config: PromptConfig
    embed_dim: int
    visual: list[Tensor] = field(default_factory=list)
    kv_key: list[Tensor] = field(default_factory=list)
    kv_value: list[Tensor] = field(default_factory=list)
    token_masks: list[np.ndarray] = field(default_factory=list)
    segment_masks: list[np.ndarray] = field(default_factory=list)
    pruned: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.token_masks)

    @property
    def visual_len(self) -> int:
        return self.config.visual_len

    @property
    def kv_len(self) -> int:
        return self.config.kv_len

    def parameters(self) -> list[Tensor]:
        """Unique prompt tensors (a shared key/value tensor is listed once)."""
        out, seen = [], set()
        for t in [*self.visual, *self.kv_key, *self.kv_value]:
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out

    def visual_keep(self, layer: int) -> np.ndarray:
        """Elementwise (M, d) 0/1 map of visual-prompt entries that survive pruning."""
        r = self.config.segments
        seg = self.token_masks[layer][:, None] * self.segment_masks[layer]
        return np.repeat(seg, self.embed_dim // r, axis=1)

    def masks_are_ones(self) -> bool:
        return all((m == 1).all() for m in self.token_masks) and \
            all((m == 1).all() for m in self.segment_masks)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.num_layers):
            if self.visual_len:
                out[f"prompts/visual/{i}"] = self.visual[i].data
                out[f"prompts/mask/{i}"] = self.token_masks[i]
                out[f"prompts/segmask/{i}"] = self.segment_masks[i]
            if self.kv_len:
                out[f"prompts/kv/{i}"] = self.kv_key[i].data
                if not self.config.kv_shared:
                    out[f"prompts/kv_value/{i}"] = self.kv_value[i].data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(self.num_layers):
            if self.visual_len:
                self.visual[i].data[...] = arrays[f"prompts/visual/{i}"]
                self.token_masks[i] = arrays[f"prompts/mask/{i}"].astype(self.token_masks[i].dtype)
                self.segment_masks[i] = arrays[f"prompts/segmask/{i}"].astype(self.segment_masks[i].dtype)
            if self.kv_len:
                self.kv_key[i].data[...] = arrays[f"prompts/kv/{i}"]
                if not self.config.kv_shared:
                    self.kv_value[i].data[...] = arrays[f"prompts/kv_value/{i}"]


def _draw(rng, shape, init: str, fan_in: int) -> np.ndarray:
    if init == "he":
        return he_normal(rng, shape, fan_in)
    return trunc_normal(rng, shape)


def init_prompts(config: ModelConfig, seed: int) -> PromptSet:
    """Fresh prompts for ``config``; all masks start at 1."""
    pc = config.prompt
    d, n = config.embed_dim, config.num_layers
    pc.validate(d)
    with precision(config.precision):
        dtype = get_dtype()
        ps = PromptSet(config=pc, embed_dim=d)
        vis_rng = make_rng(np.random.SeedSequence([seed, _VISUAL_STREAM]))
        key_rng = make_rng(np.random.SeedSequence([seed, _KV_KEY_STREAM]))
        val_rng = make_rng(np.random.SeedSequence([seed, _KV_VALUE_STREAM]))
        for i in range(n):
            if pc.visual_len:
                ps.visual.append(Tensor(_draw(vis_rng, (pc.visual_len, d), pc.init, d),
                                        requires_grad=True, name=f"prompts/visual/{i}"))
            if pc.kv_len:
                key = Tensor(_draw(key_rng, (pc.kv_len, d), pc.init, d),
                             requires_grad=True, name=f"prompts/kv/{i}")
                ps.kv_key.append(key)
                if pc.kv_shared:
                    ps.kv_value.append(key)
                else:
                    ps.kv_value.append(Tensor(_draw(val_rng, (pc.kv_len, d), pc.init, d),
                                              requires_grad=True, name=f"prompts/kv_value/{i}"))
            ps.token_masks.append(np.ones(pc.visual_len, dtype=dtype))
            ps.segment_masks.append(np.ones((pc.visual_len, pc.segments), dtype=dtype))
    return ps


def count_tunable(model: "PromptedViT") -> dict:
    """Tuned-parameter accounting in the style of a Tuned/Total column.

    Visual prompts count only entries that survive pruning.  ``ratio`` is
    (prompt + head) / backbone total, as a percentage rounded to 2 decimals.
    """
    ps = model.prompts
    visual = sum(int(ps.visual_keep(i).sum()) for i in range(ps.num_layers)) if ps.visual_len else 0
    kv = sum(t.data.size for t in {id(t): t for t in [*ps.kv_key, *ps.kv_value]}.values())
    head = sum(t.data.size for t in model.head.parameters()) if model.train_head else 0
    total = model.backbone.num_parameters()
    if total <= 0:
        raise ConfigError("backbone has no parameters")
    return {
        "visual_params": visual,
        "kv_params": kv,
        "prompt_params": visual + kv,
        "head_params": head,
        "total_backbone": total,
        "ratio": round(100.0 * (visual + kv + head) / total, 2),
    }
