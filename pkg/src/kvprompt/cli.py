"""``kvprompt`` command line: pretrain, finetune, prune, rewind, eval, sweep, embed, ablate.

Everything that affects results lives in a JSON experiment spec::

    {
      "version": 1,
      "model": {"embed_dim": 32, "prompt": {"visual_len": 4, "kv_len": 8}},
      "train": {"base_lr": 0.5, "epochs": 20, "warmup_epochs": 2},
      "pretrain": {"base_lr": 0.001, "optimizer": "adamw", "epochs": 40, "warmup_epochs": 1},
      "data": {"kind": "shift", "seed": 0},
      "backbone": "runs/pre/checkpoint"
    }

Flags only carry paths, seed/precision overrides and verbosity.  Relative
paths in a spec are resolved against the spec file's directory.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 NaN abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embed as E
from . import experiments
from .config import ConfigError, ModelConfig, TrainConfig, from_dict, to_dict
from .data import Dataset, load_csv_manifest, load_idx, make_shift_task, split_800_200
from .prompts import count_tunable
from .pruning import (PruneOrderError, batches, importance_scores, rewind, segment_prune,
                      token_prune)
from .serialize import load_checkpoint
from .tensor import NonFiniteError
from .trainer import (TrainingDiverged, build_finetune_model, evaluate, finetune, load_backbone,
                      load_model, pretrain_backbone, run_sweep, save_model)

log = logging.getLogger("kvprompt")

SPEC_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3


# ------------------------------------------------------------------ spec

@dataclass
class DataSpec:
    kind: str = "shift"
    seed: int = 0
    # shift task
    shift: float = experiments.SHIFT
    n_classes: int = 6
    n_per_class: int = experiments.TARGET_PER_CLASS
    source_per_class: int = experiments.SOURCE_PER_CLASS
    # file-backed data: {"train_images", "train_labels", "test_images", "test_labels"} for idx,
    # {"train", "test"} CSV manifests for csv
    source: dict | None = None
    target: dict | None = None
    image_size: int | None = None

    def validate(self) -> None:
        if self.kind not in ("shift", "idx", "csv"):
            raise ConfigError(f"data.kind must be 'shift', 'idx' or 'csv', got {self.kind!r}")
        if self.kind != "shift" and self.target is None:
            raise ConfigError(f"data.kind={self.kind!r} needs a 'target' section")
        keys = {"idx": {"train_images", "train_labels", "test_images", "test_labels"},
                "csv": {"train", "test"}}.get(self.kind)
        for name in ("source", "target"):
            section = getattr(self, name)
            if keys is not None and section is not None:
                unknown = sorted(set(section) - keys)
                if unknown:
                    raise ConfigError(f"unknown key(s) in data.{name}: {', '.join(unknown)}")
                if "train" not in section and "train_images" not in section:
                    raise ConfigError(f"data.{name} has no training files")


@dataclass
class ExperimentSpec:
    version: int
    model: ModelConfig = field(default_factory=experiments.desk_model)
    train: TrainConfig = field(default_factory=experiments.finetune_config)
    pretrain: TrainConfig = field(default_factory=experiments.pretrain_config)
    data: DataSpec = field(default_factory=DataSpec)
    backbone: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    embed_k: list = field(default_factory=lambda: [1, 5, 10])
    curvature: float = 1.0
    with_pruning: bool = False

    def to_json(self) -> str:
        doc = {
            "version": self.version, "model": to_dict(self.model), "train": to_dict(self.train),
            "pretrain": to_dict(self.pretrain), "data": dataclasses.asdict(self.data),
            "backbone": self.backbone, "checkpoint": self.checkpoint, "out": self.out,
            "seeds": list(self.seeds), "embed_k": list(self.embed_k), "curvature": self.curvature,
            "with_pruning": self.with_pruning,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


_PATH_KEYS = ("backbone", "checkpoint", "out")


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else (base / p).resolve())


def parse_spec(doc: dict, base: Path = Path(".")) -> ExperimentSpec:
    """Validate a decoded spec document; unknown keys and a missing version are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("experiment spec must be a JSON object")
    if "version" not in doc:
        raise ConfigError("experiment spec is missing the mandatory 'version' field")
    if doc["version"] != SPEC_VERSION:
        raise ConfigError(f"unsupported spec version {doc['version']!r} (expected {SPEC_VERSION})")
    fields = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = sorted(set(doc) - fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in experiment spec: {', '.join(unknown)}")
    try:
        return _build_spec(doc, base)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in experiment spec: {exc}") from exc


def _build_spec(doc: dict, base: Path) -> ExperimentSpec:
    defaults = ExperimentSpec(version=SPEC_VERSION)
    model = defaults.model.replace(**_model_changes(doc.get("model", {})))
    train = dataclasses.replace(defaults.train, **_checked(TrainConfig, doc.get("train", {}), "train"))
    pre = dataclasses.replace(defaults.pretrain, **_checked(TrainConfig, doc.get("pretrain", {}), "pretrain"))
    data = DataSpec(**_checked(DataSpec, doc.get("data", {}), "data"))
    for name in ("source", "target"):
        section = getattr(data, name)
        if section is not None:
            setattr(data, name, {k: _resolve(base, v) for k, v in section.items()})
    spec = ExperimentSpec(
        version=doc["version"], model=model, train=train, pretrain=pre, data=data,
        seeds=list(doc.get("seeds", defaults.seeds)), embed_k=list(doc.get("embed_k", defaults.embed_k)),
        curvature=float(doc.get("curvature", defaults.curvature)),
        with_pruning=bool(doc.get("with_pruning", defaults.with_pruning)),
        **{k: _resolve(base, doc.get(k)) for k in _PATH_KEYS})
    spec.model.validate()
    spec.train.validate()
    spec.pretrain.validate()
    spec.data.validate()
    return spec


def _checked(cls, section: dict, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"'{where}' must be an object")
    return {f.name: getattr(from_dict(cls, section, where), f.name) for f in dataclasses.fields(cls)
            if f.name in section}


def _model_changes(section: dict) -> dict:
    changes = _checked(ModelConfig, section, "model")
    if "prompt" in section:
        changes["prompt"] = {k: v for k, v in to_dict(changes["prompt"]).items() if k in section["prompt"]}
    return changes


def load_spec(path: str | Path | None) -> ExperimentSpec:
    if path is None:
        return ExperimentSpec(version=SPEC_VERSION)
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_spec(doc, path.parent.resolve())


def apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    if args.seed is not None:
        spec.model = spec.model.replace(seed=args.seed)
        spec.train = spec.train.replace(seed=args.seed)
        spec.pretrain = spec.pretrain.replace(seed=args.seed)
    if args.precision is not None:
        spec.model = spec.model.replace(precision=args.precision)
    for key in ("backbone", "checkpoint", "out"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(spec, key, str(Path(value).resolve()))
    return spec


# ------------------------------------------------------------------ data

def _load_files(kind: str, section: dict, image_size: int | None):
    if kind == "idx":
        train = load_idx(section["train_images"], section["train_labels"])
        test = load_idx(section["test_images"], section["test_labels"]) if "test_images" in section else None
    else:
        train = load_csv_manifest(section["train"], image_size)
        test = load_csv_manifest(section["test"], image_size) if "test" in section else None
    splits = {"train": train} if test is None else {"train": train, "test": test}
    num_classes = int(max(int(s.labels.max()) for s in splits.values() if len(s)) + 1)
    return Dataset(splits, num_classes)


def load_data(spec: ExperimentSpec, with_val: bool = True) -> tuple[Dataset | None, Dataset]:
    """(source, target); with ``with_val`` the target train split is divided 80/20 into train/val."""
    d = spec.data
    if d.kind == "shift":
        cfg = spec.model
        source, target = make_shift_task(d.seed, n_classes=d.n_classes, n_per_class=d.n_per_class,
                                         image_size=cfg.image_size, channels=cfg.channels, shift=d.shift,
                                         source_per_class=d.source_per_class)
    else:
        source = _load_files(d.kind, d.source, d.image_size) if d.source else None
        target = _load_files(d.kind, d.target, d.image_size)
    if not with_val:
        return source, target
    train, val = split_800_200(target["train"], d.seed)
    return source, target.with_splits(train=train, val=val)


def _target_config(spec: ExperimentSpec, target: Dataset) -> ModelConfig:
    if spec.model.num_classes != target.num_classes:
        log.info("model.num_classes set to %d from the target data", target.num_classes)
    return spec.model.replace(num_classes=target.num_classes)


# ------------------------------------------------------------------ commands

def _run_dir(spec: ExperimentSpec, command: str) -> Path:
    out = Path(spec.out or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(spec.to_json())
    return out


def _require(value, what: str, flag: str):
    if value is None:
        raise ConfigError(f"no {what} given (set '{flag.lstrip('-')}' in the spec or pass {flag})")
    return value


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(spec: ExperimentSpec, out: Path) -> dict:
    source, _ = load_data(spec)
    if source is None:
        raise ConfigError("pretraining needs a source dataset")
    model, record = pretrain_backbone(spec.model, source, spec.pretrain, out=out / "checkpoint")
    record.save(out)
    return {"source_test_acc": record.test_acc, "checkpoint": str(out / "checkpoint")}


def cmd_finetune(spec: ExperimentSpec, out: Path) -> dict:
    _, target = load_data(spec)
    cfg = _target_config(spec, target)
    backbone = load_backbone(_require(spec.backbone, "backbone checkpoint", "--backbone"), cfg)
    record, model = finetune(backbone, cfg, spec.train, target)
    record.save(out)
    save_model(model, out / "checkpoint", "finetune", spec.train, {"metrics": record.metrics()})
    return {"val_acc": record.val_acc, "test_acc": record.test_acc, "tuned_total": record.tunable["ratio"]}


def _stage(path: str) -> str:
    return load_checkpoint(path)[1].get("stage", "")


def cmd_prune(spec: ExperimentSpec, out: Path) -> dict:
    path = _require(spec.checkpoint, "fine-tuned checkpoint", "--checkpoint")
    stage = _stage(path)
    if stage != "finetune":
        raise PruneOrderError(f"prune needs a fine-tuned checkpoint, got stage {stage!r}; run finetune first")
    _, target = load_data(spec)
    model, _ = load_model(path, spec.model.precision)
    x, y = target.arrays("train", model.dtype)
    report = importance_scores(model, batches(x, y, spec.train.batch_size))
    token_prune(model, report, spec.train.prune_ratio)
    segment_prune(model, report, spec.train.effective_segment_ratio)
    (out / "importance.csv").write_text(report.to_csv())
    save_model(model, out / "checkpoint", "pruned", spec.train)
    return {"tunable": count_tunable(model), "checkpoint": str(out / "checkpoint")}


def cmd_rewind(spec: ExperimentSpec, out: Path) -> dict:
    path = _require(spec.checkpoint, "pruned checkpoint", "--checkpoint")
    stage = _stage(path)
    if stage != "pruned":
        raise PruneOrderError(f"rewind needs a pruned checkpoint, got stage {stage!r}; run prune first")
    _, target = load_data(spec)
    model, _ = load_model(path, spec.model.precision)
    record, model = rewind(model, spec.train, target)
    record.save(out)
    save_model(model, out / "checkpoint", "rewind", spec.train, {"metrics": record.metrics()})
    return {"val_acc": record.val_acc, "test_acc": record.test_acc, "tuned_total": record.tunable["ratio"]}


def _model_for_eval(spec: ExperimentSpec, target: Dataset):
    """A pretrain checkpoint is evaluated as the freshly initialised fine-tuning model."""
    path = _require(spec.checkpoint or spec.backbone, "checkpoint", "--checkpoint")
    if _stage(path) == "pretrain":
        cfg = _target_config(spec, target)
        return build_finetune_model(load_backbone(path, cfg), cfg, spec.train.seed)
    return load_model(path, spec.model.precision)[0]


def cmd_eval(spec: ExperimentSpec, out: Path) -> dict:
    _, target = load_data(spec)
    model = _model_for_eval(spec, target)
    result = {}
    for split in ("val", "test"):
        if split in target.splits:
            loss, acc = evaluate(model, *target.arrays(split, model.dtype))
            result[f"{split}_loss"], result[f"{split}_acc"] = loss, acc
    _write_json(out / "eval.json", result)
    return result


def cmd_sweep(spec: ExperimentSpec, out: Path) -> dict:
    _, target = load_data(spec, with_val=False)
    cfg = _target_config(spec, target)
    backbone = load_backbone(_require(spec.backbone, "backbone checkpoint", "--backbone"), cfg)
    result = run_sweep(backbone, cfg, spec.train, target, with_pruning=spec.with_pruning)
    (out / "sweep.txt").write_text(result.table() + "\n")
    _write_json(out / "sweep.json", [{"cell": c, "record": r.metrics()} for c, r in result.records])
    result.final.save(out)
    print(result.table())
    return {"best_cell": result.best_cell, "best_val_acc": result.best.val_acc,
            "final_test_acc": result.final.test_acc}


def cmd_embed(spec: ExperimentSpec, out: Path) -> dict:
    _, target = load_data(spec)
    model = _model_for_eval(spec, target)
    x, y = target.arrays("test" if "test" in target.splits else "val", model.dtype)
    source = "visual+kv" if model.prompts.kv_len else "visual-only"
    vectors = np.concatenate([model.features(x[lo:lo + 256]) for lo in range(0, len(y), 256)])
    emb = E.EmbeddingSet(vectors, y, source)
    points = E.disk_coordinates(emb, spec.curvature)
    ball = E.EmbeddingSet(E.poincare_project(vectors / np.sqrt((vectors ** 2).sum(1).mean()), spec.curvature),
                          y, source)
    ks = [k for k in spec.embed_k if k < len(y)]
    result = {
        "source": source, "reduction": E.REDUCTION_NOTE, "curvature": spec.curvature,
        "recall_euclidean": {str(k): E.recall_at_k(emb, k, "euclidean") for k in ks},
        "recall_poincare": {str(k): E.recall_at_k(ball, k, "poincare") for k in ks},
        "border": E.border_stats(points),
    }
    (out / "embedding.csv").write_text(E.to_csv(points, y, source))
    (out / "embedding.svg").write_text(E.to_svg(points, y, title=source))
    _write_json(out / "embed.json", result)
    return result


def cmd_ablate(spec: ExperimentSpec, out: Path) -> dict:
    _, target = load_data(spec)
    cfg = _target_config(spec, target)
    backbone = load_backbone(_require(spec.backbone, "backbone checkpoint", "--backbone"), cfg)
    result = experiments.ablate(backbone, cfg, spec.train, target, seeds=spec.seeds)
    (out / "ablation.txt").write_text(result.table() + "\n")
    _write_json(out / "ablation.json", {"seeds": result.seeds, "rows": [r.to_dict() for r in result.rows]})
    print(result.table())
    return {"rows": len(result.rows)}


COMMANDS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "prune": cmd_prune, "rewind": cmd_rewind,
    "eval": cmd_eval, "sweep": cmd_sweep, "embed": cmd_embed, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvprompt", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment spec")
    common.add_argument("--out", help="run directory (overrides the spec)")
    common.add_argument("--seed", type=int, help="seed override for model init and training")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    common.add_argument("--backbone", help="pretrained checkpoint directory")
    common.add_argument("--checkpoint", help="fine-tuned or pruned checkpoint directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = apply_overrides(load_spec(args.config), args)
        out = _run_dir(spec, args.command)
        result = COMMANDS[args.command](spec, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"aborted: non-finite values: {exc}", file=sys.stderr)
        return EXIT_NAN
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not args.quiet:
        print(json.dumps({"command": args.command, "out": str(out), **result}, indent=2, sort_keys=True,
                         default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
