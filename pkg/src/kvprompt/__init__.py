"""Visual and key-value prompt tuning with cascade prompt pruning on a small numpy ViT."""

from .config import ConfigError, ModelConfig, PromptConfig, TrainConfig
from .prompts import PromptSet, count_tunable, init_prompts
from .pruning import ImportanceReport, importance_scores, prune_and_rewind, rewind, segment_prune, token_prune
from .tensor import Tensor, backward, no_grad, precision
from .trainer import RunRecord, finetune, lr_at, pretrain_backbone, sweep
from .vit import PromptedViT, forward, init_backbone

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ImportanceReport", "ModelConfig", "PromptConfig", "PromptSet", "PromptedViT",
    "RunRecord", "Tensor", "TrainConfig", "backward", "count_tunable", "finetune", "forward",
    "importance_scores", "init_backbone", "init_prompts", "lr_at", "no_grad", "precision",
    "pretrain_backbone", "prune_and_rewind", "rewind", "segment_prune", "sweep", "token_prune",
]
