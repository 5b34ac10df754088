import numpy as np
import pytest

from kvprompt.config import ModelConfig, PromptConfig
from kvprompt.vit import PromptedViT


def tiny_config(visual_len=4, kv_len=2, precision=64, **kw):
    prompt = {k: kw.pop(k) for k in ("kv_placement", "kv_shared", "init", "segments") if k in kw}
    base = dict(image_size=8, patch_size=4, channels=3, embed_dim=16, num_layers=2, num_heads=2,
                num_classes=3, precision=precision)
    base.update(kw)
    return ModelConfig(prompt=PromptConfig(visual_len=visual_len, kv_len=kv_len, **prompt), **base)


@pytest.fixture
def make_model():
    def build(seed=0, **kw):
        return PromptedViT.create(tiny_config(**kw), seed=seed)
    return build


@pytest.fixture
def images():
    def draw(n=3, seed=0, size=8, channels=3):
        return np.random.default_rng(seed).normal(size=(n, channels, size, size))
    return draw


def tiny_task(seed=0, n_per_class=20):
    """Three-class 8x8 shift target with train/val/test splits."""
    from kvprompt.data import make_shift_task, split_800_200
    _, target = make_shift_task(seed, n_classes=3, n_per_class=n_per_class, image_size=8)
    train, val = split_800_200(target["train"], seed)
    return target.with_splits(train=train, val=val)


def tiny_train(**kw):
    from kvprompt.config import TrainConfig
    base = dict(base_lr=0.1, epochs=3, warmup_epochs=1, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
