"""Cascade pruning of visual prompts (token-wise, then segment-wise) and rewinding.

Importance of a mask variable is the mean absolute gradient of the
per-example loss with respect to it, taken at mask value 1.  Masks scale
prompt embeddings; a token whose mask is 0 is also hidden from attention,
so zeroing it is equivalent to deleting the prompt.  While probing, a token
mask additionally weights its prompt's attention column, which makes its
gradient a first-order estimate of that deletion.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .config import ConfigError, TrainConfig
from .data import Dataset
from .prompts import count_tunable
from .trainer import RunRecord, finetune
from .vit import PromptedViT


class PruneOrderError(RuntimeError):
    pass


@dataclass
class ImportanceReport:
    token_scores: list[np.ndarray]    # per layer, (M,)
    segment_scores: list[np.ndarray]  # per layer, (M, R)
    batches_accumulated: int = 0
    examples: int = 0
    token_keep: list[np.ndarray] | None = None
    segment_keep: list[np.ndarray] | None = None
    prune_ratio: float | None = None
    segment_ratio: float | None = None

    def to_csv(self) -> str:
        """Rows ``layer,token,segment,score,pruned``; token rows use segment -1."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "token", "segment", "score", "pruned"])
        for layer, (ts, ss) in enumerate(zip(self.token_scores, self.segment_scores)):
            for k in range(len(ts)):
                tok_pruned = self.token_keep is not None and not self.token_keep[layer][k]
                w.writerow([layer, k, -1, repr(float(ts[k])), int(tok_pruned)])
                for j in range(ss.shape[1]):
                    seg_pruned = tok_pruned or (self.segment_keep is not None
                                                and not self.segment_keep[layer][k, j])
                    w.writerow([layer, k, j, repr(float(ss[k, j])), int(seg_pruned)])
        return buf.getvalue()


def batches(x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    for lo in range(0, len(y), batch_size):
        yield x[lo:lo + batch_size], y[lo:lo + batch_size]


def importance_scores(model: PromptedViT, data: Iterable[tuple[np.ndarray, np.ndarray]]) -> ImportanceReport:
    """Mean over examples of |dL(x)/d rho| for every token and segment mask.

    Each example gets its own copy of the mask variables, so a single
    backward pass over a batch yields all per-example gradients.  Model
    parameters are not touched.
    """
    ps = model.prompts
    M, R, N = ps.visual_len, ps.config.segments, ps.num_layers
    if not ps.masks_are_ones():
        raise PruneOrderError("importance probing needs every mask at 1 (model already pruned?)")
    tok_sum = [np.zeros(M) for _ in range(N)]
    seg_sum = [np.zeros((M, R)) for _ in range(N)]
    report = ImportanceReport(tok_sum, seg_sum)
    params = model.backbone.parameters() + model.head.parameters() + ps.parameters()
    flags = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad = False
        for xb, yb in data:
            if M == 0:
                report.batches_accumulated += 1
                report.examples += len(yb)
                continue
            b = len(yb)
            tok = [T.ones((b, M), requires_grad=True, dtype=model.dtype) for _ in range(N)]
            seg = [T.ones((b, M, R), requires_grad=True, dtype=model.dtype) for _ in range(N)]
            logits = model(np.asarray(xb, dtype=model.dtype), probes={"token": tok, "segment": seg})
            T.backward(T.cross_entropy(logits, yb, reduction="sum"))
            for i in range(N):
                tok_sum[i] += np.abs(tok[i].grad.astype(np.float64)).sum(axis=0)
                seg_sum[i] += np.abs(seg[i].grad.astype(np.float64)).sum(axis=0)
            report.batches_accumulated += 1
            report.examples += b
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
            if f:
                p.grad = np.zeros_like(p.data)
    if report.examples == 0:
        raise ValueError("importance_scores received an empty data stream")
    report.token_scores = [s / report.examples for s in tok_sum]
    report.segment_scores = [s / report.examples for s in seg_sum]
    return report


def merge_reports(reports: list[ImportanceReport]) -> ImportanceReport:
    """Example-weighted mean of reports computed on disjoint shards."""
    total = sum(r.examples for r in reports)
    if total == 0:
        raise ValueError("no examples in any shard")
    n = len(reports[0].token_scores)
    tok = [sum(r.token_scores[i] * r.examples for r in reports) / total for i in range(n)]
    seg = [sum(r.segment_scores[i] * r.examples for r in reports) / total for i in range(n)]
    return ImportanceReport(tok, seg, sum(r.batches_accumulated for r in reports), total)


def lowest(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` lowest scores; on ties the higher index goes first."""
    idx = np.arange(len(scores))
    order = np.lexsort((-idx, scores))
    return order[:count]


def token_prune(model: PromptedViT, report: ImportanceReport, ratio: float) -> list[np.ndarray]:
    """Zero the floor(ratio * M) lowest-scoring token masks in every layer."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"prune ratio {ratio} outside [0, 1]")
    ps = model.prompts
    if len(report.token_scores) != ps.num_layers or any(len(s) != ps.visual_len for s in report.token_scores):
        raise ConfigError("importance report does not match the model's prompts")
    count = int(np.floor(ratio * ps.visual_len + 1e-9))
    keep = []
    for i, scores in enumerate(report.token_scores):
        k = np.ones(ps.visual_len, dtype=bool)
        k[lowest(scores, count)] = False
        keep.append(k)
        ps.token_masks[i] = k.astype(ps.token_masks[i].dtype)
        ps.segment_masks[i] = np.where(k[:, None], ps.segment_masks[i], 0).astype(ps.segment_masks[i].dtype)
    report.token_keep = keep
    report.prune_ratio = ratio
    ps.pruned = True
    return ps.token_masks


def segment_prune(model: PromptedViT, report: ImportanceReport, ratio: float) -> list[np.ndarray]:
    """Within each surviving token, zero the floor(ratio * R) lowest-scoring segments."""
    if report.token_keep is None:
        raise PruneOrderError("segment pruning must follow token pruning")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"segment prune ratio {ratio} outside [0, 1]")
    ps = model.prompts
    R = ps.config.segments
    if ps.embed_dim % R:
        raise ConfigError(f"embed_dim {ps.embed_dim} not divisible by {R} segments")
    count = int(np.floor(ratio * R + 1e-9))
    seg_keep = []
    for i, scores in enumerate(report.segment_scores):
        keep = np.zeros((ps.visual_len, R), dtype=bool)
        for k in np.flatnonzero(report.token_keep[i]):
            row = np.ones(R, dtype=bool)
            row[lowest(scores[k], count)] = False
            keep[k] = row
        seg_keep.append(keep)
        ps.segment_masks[i] = keep.astype(ps.segment_masks[i].dtype)
        # a token with no surviving segment is gone entirely
        ps.token_masks[i] = (report.token_keep[i] & keep.any(axis=1)).astype(ps.token_masks[i].dtype)
    report.segment_keep = seg_keep
    report.segment_ratio = ratio
    return ps.segment_masks


def rewind(model: PromptedViT, tc: TrainConfig, dataset: Dataset, val_split: str | None = "val",
           test_split: str | None = "test") -> tuple[RunRecord, PromptedViT]:
    """Re-train surviving prompts, KV prompts and head once, masks frozen, same lr/wd."""
    if not model.prompts.pruned:
        raise PruneOrderError("rewind called before pruning")
    record, model = finetune(model.backbone, model.config, tc, dataset, val_split=val_split,
                             test_split=test_split, model=model)
    record.config["stage"] = "rewind"
    return record, model


def prune_and_rewind(model: PromptedViT, tc: TrainConfig, dataset: Dataset, val_split: str | None = "val",
                     test_split: str | None = "test") -> tuple[RunRecord, PromptedViT, ImportanceReport]:
    """Score on the train split, prune tokens then segments, rewind once."""
    x, y = dataset.arrays("train", model.dtype)
    report = importance_scores(model, batches(x, y, tc.batch_size))
    token_prune(model, report, tc.prune_ratio)
    segment_prune(model, report, tc.effective_segment_ratio)
    record, model = rewind(model, tc, dataset, val_split, test_split)
    record.tunable = count_tunable(model)
    return record, model, report
