"""Pretraining, prompt fine-tuning and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, PromptConfig, TrainConfig, from_dict, to_dict
from .data import Dataset, Split, split_800_200
from .prompts import count_tunable, init_prompts
from .serialize import load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor
from .vit import Backbone, Head, PromptedViT, init_backbone, init_head

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite; the run is aborted."""


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay reaching 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """SGD with momentum and decoupled weight decay.

    ``update_masks`` maps ``id(param)`` to a 0/1 array; masked-out entries
    never move (pruned prompt slots).
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0,
                 update_masks: dict[int, np.ndarray] | None = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.masks = update_masks or {}
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        for p, buf in zip(self.params, self.buf):
            buf *= self.momentum
            buf += p.grad
            delta = lr * buf
            if self.weight_decay:
                delta = delta + (lr * self.weight_decay) * p.data
            mask = self.masks.get(id(p))
            if mask is not None:
                delta = delta * mask
            p.data -= delta.astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8, update_masks: dict[int, np.ndarray] | None = None):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.masks = update_masks or {}
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            delta = lr * (m / c1) / (np.sqrt(v / c2) + self.eps) + lr * self.weight_decay * p.data
            mask = self.masks.get(id(p))
            if mask is not None:
                delta = delta * mask
            p.data -= delta.astype(p.dtype, copy=False)


def make_optimizer(params, tc: TrainConfig, update_masks=None):
    if tc.optimizer == "adamw":
        return AdamW(params, tc.weight_decay, update_masks=update_masks)
    return SGD(params, tc.momentum, tc.weight_decay, update_masks=update_masks)


@dataclass
class RunRecord:
    config: dict
    history: list[dict] = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    best_epoch: int = 0
    val_acc: float | None = None
    test_acc: float | None = None
    tunable: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.history)

    def metrics(self) -> dict:
        """Everything except timing; bit-identical across reruns of the same spec."""
        return {k: v for k, v in to_dict(self).items() if k != "wall_time"}

    def to_json(self) -> str:
        return json.dumps(self.metrics(), indent=2, sort_keys=True) + "\n"

    def history_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in [self.initial, *self.history]:
            if row:
                w.writerow({k: ("" if row.get(k) is None else repr(row.get(k))) for k in cols})
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "record.json").write_text(self.to_json())
        (directory / "history.csv").write_text(self.history_csv())
        (directory / "timing.json").write_text(json.dumps({"wall_time": self.wall_time}) + "\n")


# ------------------------------------------------------------------ evaluation

def evaluate(model: PromptedViT, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """(mean cross-entropy, accuracy in percent)."""
    if len(y) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for lo in range(0, len(y), batch_size):
            logits = model(x[lo:lo + batch_size])
            total_loss += T.cross_entropy(logits, y[lo:lo + batch_size], reduction="sum").item()
            correct += int((logits.data.argmax(axis=1) == y[lo:lo + batch_size]).sum())
    return total_loss / len(y), 100.0 * correct / len(y)


def _snapshot(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[Tensor], arrays: list[np.ndarray]) -> None:
    for p, a in zip(params, arrays):
        p.data[...] = a


def train_loop(model: PromptedViT, params: Sequence[Tensor], tc: TrainConfig,
               train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None,
               record: RunRecord, update_masks: dict | None = None,
               guard: Callable[[], None] | None = None) -> RunRecord:
    """Minibatch training with warmup+cosine schedule and best-val selection.

    ``guard`` runs after every epoch (frozen-backbone checksum assertions).
    """
    x, y = train
    n = len(y)
    steps_per_epoch = max(1, math.ceil(n / tc.batch_size))
    total = tc.epochs * steps_per_epoch
    warmup = tc.warmup_epochs * steps_per_epoch
    opt = make_optimizer(params, tc, update_masks)
    rng = T.make_rng(np.random.SeedSequence([tc.seed, 3]))

    def val_metrics():
        if val is None:
            return None, None
        return evaluate(model, *val)

    vl, va = val_metrics()
    record.initial = {"epoch": 0, "lr": 0.0, "val_loss": vl, "val_acc": va}
    best_acc, best_state, record.best_epoch = va, _snapshot(params), 0

    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr = 0.0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            lr = lr_at(step, total, warmup, tc.base_lr)
            opt.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model(x[idx])
                    loss = T.cross_entropy(logits, y[idx])
                    T.backward(loss)
                    for p in params:
                        if not np.isfinite(p.grad).all():
                            raise NonFiniteError(f"non-finite gradient for {p.name}")
                    opt.step(lr)
                    for p in params:
                        if not np.isfinite(p.data).all():
                            raise NonFiniteError(f"non-finite parameter {p.name}")
            except NonFiniteError as exc:
                raise TrainingDiverged(f"NaN/Inf at epoch {epoch}, step {step} (lr={lr:g}): {exc}") from exc
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            step += 1
        if guard is not None:
            guard()
        vl, va = val_metrics()
        record.history.append({"epoch": epoch, "lr": lr, "train_loss": loss_sum / n,
                               "train_acc": 100.0 * correct / n, "val_loss": vl, "val_acc": va})
        if va is not None and va > best_acc:
            best_acc, best_state, record.best_epoch = va, _snapshot(params), epoch
    if val is not None:
        _restore(params, best_state)
        record.val_acc = best_acc
    else:
        record.best_epoch = tc.epochs
    return record


# ------------------------------------------------------------------ checkpoints

def model_manifest(model: PromptedViT, stage: str, tc: TrainConfig | None = None, extra: dict | None = None) -> dict:
    ps = model.prompts
    doc = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "model_config": to_dict(model.config),
        "train_config": to_dict(tc) if tc is not None else None,
        "seed": tc.seed if tc is not None else model.config.seed,
        "train_head": model.train_head,
        "pruned": ps.pruned,
        "masks": {str(i): {"token": ps.token_masks[i].tolist(), "segment": ps.segment_masks[i].tolist()}
                  for i in range(ps.num_layers)} if ps.visual_len else {},
    }
    doc.update(extra or {})
    return doc


def save_model(model: PromptedViT, path: str | Path, stage: str, tc: TrainConfig | None = None,
               extra: dict | None = None) -> Path:
    return save_checkpoint(path, model.named_arrays(), model_manifest(model, stage, tc, extra))


def _architecture(cfg: ModelConfig) -> tuple:
    return (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim, cfg.num_layers,
            cfg.num_heads, cfg.ffn_mult)


def load_backbone(path: str | Path, config: ModelConfig | None = None) -> Backbone:
    """Backbone weights from any checkpoint; ``config`` (if given) must share its architecture."""
    arrays, manifest = load_checkpoint(path)
    saved = from_dict(ModelConfig, manifest["model_config"])
    if config is None:
        config = saved
    elif _architecture(config) != _architecture(saved):
        raise ConfigError(f"checkpoint architecture {_architecture(saved)} does not match config "
                          f"{_architecture(config)}")
    bb = init_backbone(config, 0)
    for name, t in bb.params.items():
        t.data[...] = arrays[f"backbone/{name}"].astype(t.dtype)
    bb.set_trainable(False)
    return bb


def load_model(path: str | Path, precision: int | None = None) -> tuple[PromptedViT, dict]:
    arrays, manifest = load_checkpoint(path)
    cfg = from_dict(ModelConfig, manifest["model_config"])
    if precision is not None:
        cfg = cfg.replace(precision=precision)
    bb = load_backbone(path, cfg)
    model = PromptedViT(cfg, bb, init_head(cfg, 0), init_prompts(cfg, 0), manifest.get("train_head", True))
    model.head.weight.data[...] = arrays["head/weight"]
    model.head.bias.data[...] = arrays["head/bias"]
    model.prompts.load_arrays(arrays)
    model.prompts.pruned = bool(manifest.get("pruned", False))
    return model, manifest


def copy_backbone(bb: Backbone, config: ModelConfig | None = None) -> Backbone:
    cfg = config or bb.config
    new = init_backbone(cfg, 0)
    for name, t in new.params.items():
        t.data[...] = bb.params[name].data.astype(t.dtype)
    new.set_trainable(False)
    return new


# ------------------------------------------------------------------ workflows

def pretrain_backbone(config: ModelConfig, source: Dataset, tc: TrainConfig,
                      out: str | Path | None = None, split: str = "train") -> tuple[PromptedViT, RunRecord]:
    """Full-model training on the source task (no prompts, everything trainable)."""
    tc.validate()
    cfg = config.replace(num_classes=source.num_classes, prompt=PromptConfig(segments=config.prompt.segments))
    cfg.validate()
    if source[split].images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"source images {source[split].images.shape[1:]} do not match config")
    start = time.perf_counter()
    with T.precision(cfg.precision):
        model = PromptedViT.create(cfg, seed=cfg.seed)
        model.backbone.set_trainable(True)
        params = model.backbone.parameters() + model.head.parameters()
        record = RunRecord(config={"model": to_dict(cfg), "train": to_dict(tc), "stage": "pretrain"})
        train = source.arrays(split, model.dtype)
        val = source.arrays("val", model.dtype) if "val" in source.splits else None
        train_loop(model, params, tc, train, val, record)
        model.backbone.set_trainable(False)
        if "test" in source.splits:
            record.test_acc = evaluate(model, *source.arrays("test", model.dtype))[1]
    record.wall_time = time.perf_counter() - start
    if out is not None:
        save_model(model, out, "pretrain", tc, {"metrics": record.metrics(),
                                                 "normalization": _norm(source)})
    return model, record


def _norm(ds: Dataset) -> dict:
    return {"mean": [float(v) for v in ds.mean], "std": [float(v) for v in ds.std]}


def build_finetune_model(backbone: Backbone, config: ModelConfig, seed: int, train_head: bool = True) -> PromptedViT:
    config.validate()
    bb = copy_backbone(backbone, config)
    if _architecture(bb.config) != _architecture(config):
        raise ConfigError("backbone architecture does not match the fine-tuning config")
    bb.config = config
    return PromptedViT(config, bb, init_head(config, seed), init_prompts(config, seed), train_head)


def _frozen_guard(model: PromptedViT):
    reference = model.backbone.checksum()

    def guard():
        if model.backbone.checksum() != reference:
            raise RuntimeError("frozen backbone changed during training")
    return guard


def finetune(backbone: Backbone | str | Path, config: ModelConfig, tc: TrainConfig, dataset: Dataset,
             train_split: str = "train", val_split: str | None = "val", test_split: str | None = "test",
             train_head: bool = True, model: PromptedViT | None = None) -> tuple[RunRecord, PromptedViT]:
    """Train prompts + head on a frozen backbone.

    With a validation split the parameters of the best-val epoch are kept
    (epoch 0, the initialisation, is a candidate).  Without one, the last
    epoch is kept.
    """
    tc.validate()
    if config.num_classes != dataset.num_classes:
        raise ConfigError(f"config has {config.num_classes} classes, dataset has {dataset.num_classes}")
    for name in (train_split, val_split):
        if name is not None and name not in dataset.splits:
            raise KeyError(f"dataset is missing the {name!r} split")
    if not isinstance(backbone, Backbone):
        backbone = load_backbone(backbone, config)
    start = time.perf_counter()
    with T.precision(config.precision):
        if model is None:
            model = build_finetune_model(backbone, config, tc.seed, train_head)
        model.freeze_backbone()
        record = RunRecord(config={"model": to_dict(config), "train": to_dict(tc), "stage": "finetune"})
        params = model.trainable()
        train = dataset.arrays(train_split, model.dtype)
        val = dataset.arrays(val_split, model.dtype) if val_split else None
        train_loop(model, params, tc, train, val, record, _update_masks(model), _frozen_guard(model))
        if test_split and test_split in dataset.splits:
            record.test_acc = evaluate(model, *dataset.arrays(test_split, model.dtype))[1]
        record.tunable = count_tunable(model)
    record.wall_time = time.perf_counter() - start
    return record, model


def _update_masks(model: PromptedViT) -> dict[int, np.ndarray] | None:
    ps = model.prompts
    if not ps.visual_len or ps.masks_are_ones():
        return None
    return {id(ps.visual[i]): ps.visual_keep(i).astype(model.dtype) for i in range(ps.num_layers)}


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepResult:
    best: RunRecord
    best_cell: dict
    records: list[tuple[dict, RunRecord]]
    final: RunRecord | None = None

    @property
    def failed(self) -> list[dict]:
        return [cell for cell, rec in self.records if rec.status != "ok"]

    def table(self) -> str:
        lines = [f"{'lr':>8} {'wd':>8} {'prune':>6} {'Tuned/Total':>12} {'Val acc':>8} status"]
        for cell, rec in self.records:
            ratio = rec.tunable.get("ratio")
            lines.append(f"{cell['lr']:>8g} {cell['wd']:>8g} {cell.get('prune', 0.0):>6.0%} "
                         f"{'' if ratio is None else f'{ratio:.2f}%':>12} "
                         f"{'' if rec.val_acc is None else f'{rec.val_acc:.2f}%':>8} {rec.status}")
        return "\n".join(lines)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("KVPROMPT_THREADS", "1")))
    except ValueError:
        return 1


def sweep(pipeline: Callable[[dict], RunRecord], lr_grid: Sequence[float], wd_grid: Sequence[float],
          prune_grid: Sequence[float] | None = None, workers: int | None = None) -> SweepResult:
    """Evaluate ``pipeline`` on every grid cell; argmax val accuracy, first cell wins ties.

    A cell whose pipeline raises :class:`TrainingDiverged` is recorded as failed.
    """
    grids = [lr_grid, wd_grid] + ([prune_grid] if prune_grid is not None else [])
    keys = ("lr", "wd", "prune")[:len(grids)]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*grids)]
    if not cells:
        raise ValueError("sweep grid is empty")

    def run(cell):
        try:
            return pipeline(cell)
        except TrainingDiverged as exc:
            log.warning("cell %s failed: %s", cell, exc)
            return RunRecord(config=dict(cell), status="failed", error=str(exc))

    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    records = list(zip(cells, results))
    ok = [(c, r) for c, r in records if r.status == "ok" and r.val_acc is not None]
    if not ok:
        raise TrainingDiverged("every sweep cell failed")
    best_cell, best = max(ok, key=lambda cr: cr[1].val_acc)  # max keeps the first maximal element
    return SweepResult(best=best, best_cell=best_cell, records=records)


def run_sweep(backbone: Backbone, config: ModelConfig, tc: TrainConfig, dataset: Dataset,
              with_pruning: bool = False, workers: int | None = None) -> SweepResult:
    """Grid search on an 800/200 split of train, then retrain the winner on the full train split."""
    from .pruning import prune_and_rewind

    sub_train, sub_val = split_800_200(dataset["train"], tc.seed)
    tuning = dataset.with_splits(train=sub_train, val=sub_val)

    def pipeline(cell):
        cell_tc = tc.replace(base_lr=cell["lr"], weight_decay=cell["wd"])
        rec, model = finetune(backbone, config, cell_tc, tuning)
        if with_pruning:
            cell_tc = cell_tc.replace(prune_ratio=cell["prune"], segment_ratio=tc.segment_ratio)
            rec = prune_and_rewind(model, cell_tc, tuning)[0]
        return rec

    result = sweep(pipeline, tc.lr_grid, tc.wd_grid, tc.prune_ratio_grid if with_pruning else None, workers)
    win = result.best_cell
    final_tc = tc.replace(base_lr=win["lr"], weight_decay=win["wd"])
    final, model = finetune(backbone, config, final_tc, dataset, val_split=None)
    if with_pruning:
        final_tc = final_tc.replace(prune_ratio=win["prune"])
        final = prune_and_rewind(model, final_tc, dataset, val_split=None)[0]
    result.final = final
    return result
