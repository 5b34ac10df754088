"""Desk-scale component ablation on the bundled shift task.

The four rows mirror a component table: visual prompts alone, plus
key-value prompts, each with and without pruning + rewinding.  Pruned rows
start from the corresponding unpruned model, so a row pair shares its
fine-tuning run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, PromptConfig, TrainConfig
from .data import Dataset, make_shift_task, split_800_200
from .pruning import prune_and_rewind
from .trainer import finetune, pretrain_backbone
from .vit import Backbone

# bundled shift task: 12 grey source glyphs, 6 coloured/striped target glyphs
SHIFT = 0.6
SOURCE_PER_CLASS = 100
TARGET_PER_CLASS = 300


def desk_model(num_classes: int = 6, visual_len: int = 4, kv_len: int = 8, **prompt) -> ModelConfig:
    return ModelConfig(embed_dim=32, num_layers=2, num_heads=4, num_classes=num_classes,
                       prompt=PromptConfig(visual_len=visual_len, kv_len=kv_len, **prompt))


def pretrain_config() -> TrainConfig:
    return TrainConfig(base_lr=1e-3, weight_decay=0.01, epochs=40, warmup_epochs=1, optimizer="adamw")


def finetune_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(base_lr=0.5, weight_decay=0.0, epochs=20, warmup_epochs=2, prune_ratio=0.5,
                       segment_ratio=0.5, seed=seed)


def shift_task(seed: int = 0) -> tuple[Dataset, Dataset]:
    """(source, target); the target train split is divided 80/20 into train/val."""
    source, target = make_shift_task(seed, n_per_class=TARGET_PER_CLASS, source_per_class=SOURCE_PER_CLASS,
                                     shift=SHIFT)
    train, val = split_800_200(target["train"], seed)
    return source, target.with_splits(train=train, val=val)


def pretrain_source(source: Dataset, out=None, seed: int = 0) -> Backbone:
    model, _ = pretrain_backbone(desk_model(source.num_classes, 0, 0).replace(seed=seed), source,
                                 pretrain_config(), out=out)
    return model.backbone


@dataclass
class AblationRow:
    visual: bool
    kv: bool
    prune_rewind: bool
    pruning: float          # percent of visual-prompt parameters removed
    tuned_total: float      # percent, mean over seeds
    val_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    visual_params: int = 0

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.val_acc))

    def to_dict(self) -> dict:
        return {"visual": self.visual, "kv": self.kv, "prune_rewind": self.prune_rewind,
                "pruning": self.pruning, "tuned_total": self.tuned_total, "accuracy": self.accuracy,
                "val_acc": self.val_acc, "test_acc": self.test_acc, "visual_params": self.visual_params}


@dataclass
class Ablation:
    rows: list[AblationRow]
    seeds: list[int]
    wall_time: float = 0.0

    def row(self, kv: bool, prune_rewind: bool) -> AblationRow:
        return next(r for r in self.rows if r.kv == kv and r.prune_rewind == prune_rewind)

    def table(self) -> str:
        def mark(flag):
            return "x" if flag else ""
        lines = [f"{'Visual':>6} {'KV':>3} {'P&R':>4} {'Pruning':>8} {'Tuned/Total':>12} {'Accuracy':>9}"]
        for r in self.rows:
            lines.append(f"{mark(r.visual):>6} {mark(r.kv):>3} {mark(r.prune_rewind):>4} {r.pruning:>7.1f}% "
                         f"{r.tuned_total:>11.2f}% {r.accuracy:>8.2f}%")
        return "\n".join(lines)


def ablate(backbone: Backbone, config: ModelConfig, tc: TrainConfig, dataset: Dataset,
           seeds=(0, 1, 2)) -> Ablation:
    """Four-row component matrix; accuracy is best-val accuracy averaged over ``seeds``.

    ``config`` supplies the visual and key-value prompt lengths used by the
    rows that enable them.
    """
    start = time.perf_counter()
    rows = []
    for use_kv in (False, True):
        cfg = config.replace(prompt={"kv_len": config.prompt.kv_len if use_kv else 0})
        plain = AblationRow(True, use_kv, False, 0.0, 0.0)
        pruned = AblationRow(True, use_kv, True, 0.0, 0.0)
        ratios, pruned_ratios, removed = [], [], []
        for seed in seeds:
            seed_tc = tc.replace(seed=seed)
            rec, model = finetune(backbone, cfg.replace(seed=seed), seed_tc, dataset)
            plain.val_acc.append(rec.val_acc)
            plain.test_acc.append(rec.test_acc)
            ratios.append(rec.tunable["ratio"])
            before = rec.tunable["visual_params"]
            rec2, _, _ = prune_and_rewind(model, seed_tc, dataset)
            pruned.val_acc.append(rec2.val_acc)
            pruned.test_acc.append(rec2.test_acc)
            pruned_ratios.append(rec2.tunable["ratio"])
            removed.append(100.0 * (1.0 - rec2.tunable["visual_params"] / before) if before else 0.0)
            plain.visual_params, pruned.visual_params = before, rec2.tunable["visual_params"]
        plain.tuned_total = float(np.mean(ratios))
        pruned.tuned_total = float(np.mean(pruned_ratios))
        pruned.pruning = float(np.mean(removed))
        rows += [plain, pruned]
    rows.sort(key=lambda r: (r.prune_rewind, r.kv))
    return Ablation(rows, list(seeds), time.perf_counter() - start)
