"""Dataset containers, IDX/PGM readers and the synthetic distribution-shift task."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Split:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.images[idx], self.labels[idx])


@dataclass
class Dataset:
    splits: dict[str, Split]
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    name: str = "dataset"
    label_names: list[int] = field(default_factory=list)

    def __post_init__(self):
        for name, sp in self.splits.items():
            if len(sp) and (sp.labels.min() < 0 or sp.labels.max() >= self.num_classes):
                raise DataFormatError(f"split {name!r} has labels outside [0, {self.num_classes})")
        if self.mean is None and "train" in self.splits:
            self.fit_normalization("train")

    def __getitem__(self, split: str) -> Split:
        if split not in self.splits:
            raise KeyError(f"dataset {self.name!r} has no {split!r} split (have {sorted(self.splits)})")
        return self.splits[split]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def fit_normalization(self, split: str = "train") -> None:
        imgs = self.splits[split].images.astype(np.float64) / 255.0
        self.mean = imgs.mean(axis=(0, 2, 3))
        self.std = np.maximum(imgs.std(axis=(0, 2, 3)), 1e-3)

    def arrays(self, split: str, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Normalised float images and labels for ``split``."""
        sp = self[split]
        x = sp.images.astype(np.float64) / 255.0
        x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return x.astype(dtype), sp.labels

    def with_splits(self, **splits: Split) -> "Dataset":
        new = dict(self.splits)
        new.update(splits)
        return Dataset(new, self.num_classes, self.mean, self.std, self.name, list(self.label_names))


# ------------------------------------------------------------------ IDX

def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (big-endian dims)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated at byte offset {len(buf)} while reading magic")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic at byte offset 0: expected 0x{expected_magic:08x}, "
                              f"got 0x{magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated at byte offset {len(buf)} while reading dims "
                              f"(header needs {header} bytes)")
    dims = struct.unpack_from(f">{rank}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise DataFormatError(f"{path}: truncated at byte offset {len(buf)}: header declares {count} "
                              f"payload bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def load_idx(images_path: str | Path, labels_path: str | Path) -> Split:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path}: {len(images)} images vs {len(labels)} labels")
    return Split(images, labels)


# ------------------------------------------------------------------ PGM / CSV manifest

def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) 8-bit PGM -> (H, W) uint8."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header at byte offset {pos}")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: bad PGM magic {tokens[0]!r}, expected b'P5'")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    if len(buf) - pos < w * h:
        raise DataFormatError(f"{path}: truncated PGM payload at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (N, C, H, W) to (N, C, size, size)."""
    h, w = images.shape[-2:]
    if h == size and w == size:
        return images
    rows = (np.arange(size) * h // size).astype(np.int64)
    cols = (np.arange(size) * w // size).astype(np.int64)
    return images[..., rows[:, None], cols[None, :]]


def load_csv_manifest(path: str | Path, image_size: int | None = None) -> Split:
    """CSV with ``path,label`` rows pointing at grayscale PGM files (relative to the CSV)."""
    path = Path(path)
    images, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_pgm(path.parent / row["path"])[None]
            if image_size is not None:
                img = resize_nearest(img[None], image_size)[0]
            images.append(img)
            labels.append(int(row["label"]))
    if not images:
        return Split(np.zeros((0, 1, image_size or 0, image_size or 0), np.uint8), np.zeros(0, np.int64))
    return Split(np.stack(images), np.array(labels))


# ------------------------------------------------------------------ splitting

def split_800_200(split: Split, seed: int) -> tuple[Split, Split]:
    """Stratified 80/20 split of a training set (800/200 for 1000 examples).

    Each class contributes floor(0.2 * n_c) validation examples; leftover
    validation slots (to reach round(0.2 * N)) go to the classes with the
    largest fractional remainders.  Single-example classes always stay in
    the training part.
    """
    n = len(split)
    if n < 2:
        raise ValueError("need at least 2 examples to split")
    rng = make_rng(np.random.SeedSequence([seed, 800]))
    classes = np.unique(split.labels)
    members = {c: rng.permutation(np.flatnonzero(split.labels == c)) for c in classes}
    target = int(round(0.2 * n))
    quota = {c: int(np.floor(0.2 * len(members[c]))) for c in classes}
    singles = [c for c in classes if len(members[c]) < 2]
    if singles:
        log.warning("classes %s have a single example; kept in the training part", singles)
    spare = target - sum(quota.values())
    order = sorted((c for c in classes if len(members[c]) >= 2 and quota[c] < len(members[c]) - 1),
                   key=lambda c: (-(0.2 * len(members[c]) - quota[c]), c))
    for c in order[:max(spare, 0)]:
        quota[c] += 1
    val_idx = np.concatenate([members[c][:quota[c]] for c in classes]).astype(np.int64)
    train_idx = np.concatenate([members[c][quota[c]:] for c in classes]).astype(np.int64)
    return split.subset(np.sort(train_idx)), split.subset(np.sort(val_idx))


# ------------------------------------------------------------------ synthetic shift task

def _glyphs(rng: np.random.Generator, count: int, grid: int = 3) -> np.ndarray:
    """``count`` distinct random binary glyphs on a grid x grid lattice."""
    seen, out = set(), []
    while len(out) < count:
        g = rng.random((grid, grid)) < 0.5
        if g.sum() < 3 or g.sum() > grid * grid - 2:
            continue
        key = g.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(g)
    return np.stack(out)


def _render(rng, glyph: np.ndarray, size: int, cell: int, jitter: int, fg: np.ndarray, bg: np.ndarray,
            noise: float, stripes: float) -> np.ndarray:
    g = np.kron(glyph, np.ones((cell, cell), dtype=bool))
    gh = g.shape[0]
    centre = (size - gh) // 2
    lo, hi = max(0, centre - jitter), min(size - gh, centre + jitter)
    top, left = rng.integers(lo, hi + 1, size=2)
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + gh, left:left + gh] = g
    yy, xx = np.mgrid[0:size, 0:size]
    texture = stripes * np.sin(1.3 * xx + 0.4 * yy + rng.uniform(0, 2 * np.pi))
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None] + texture[None])
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img * 255.0, 0, 255).astype(np.uint8)


def make_shift_task(seed: int, n_classes: int = 6, n_per_class: int = 100, image_size: int = 16,
                    channels: int = 3, source_classes: int | None = None, test_per_class: int | None = None,
                    jitter: int = 2, shift: float = 1.0,
                    source_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Source and target classification tasks with disjoint label sets.

    Every class is a random binary glyph on a 3x3 lattice stamped near the
    image centre (up to ``jitter`` pixels off).  Source classes use one set
    of glyphs drawn as grey shapes on a dark plain background; target
    classes use different glyphs drawn in saturated colours over a tinted,
    striped background, so colour and texture statistics shift away from
    what the backbone saw during pretraining.  ``shift`` scales the colour
    tint and texture strength (0 renders targets in the source style).
    ``n_per_class`` sizes the target train split; ``source_per_class``
    (default: the same) sizes the source one.
    """
    source_classes = 2 * n_classes if source_classes is None else source_classes
    source_per_class = n_per_class if source_per_class is None else source_per_class
    rng = make_rng(np.random.SeedSequence([seed, 7]))
    glyphs = _glyphs(rng, source_classes + n_classes)
    cell = max(1, image_size // 5)

    def source_style(r):
        return np.full(channels, r.uniform(0.75, 1.0)), np.full(channels, r.uniform(0.0, 0.2)), 0.04, 0.0

    def target_style(r):
        fg, bg, noise, _ = source_style(r)
        fg = np.clip(fg - shift * r.uniform(0.0, 0.6, channels), 0.0, 1.0)
        bg = np.clip(bg + shift * r.uniform(0.0, 0.3, channels), 0.0, 1.0)
        return fg, bg, noise, 0.08 * shift

    def build(offset: int, count: int, per: int, style, name: str, tag: int) -> Dataset:
        splits = {}
        n_test = per // 2 if test_per_class is None else test_per_class
        for split_tag, (split_name, n) in enumerate((("train", per), ("test", n_test))):
            sr = make_rng(np.random.SeedSequence([seed, tag, split_tag]))
            imgs, labels = [], []
            for c in range(count):
                for _ in range(n):
                    fg, bg, noise, stripes = style(sr)
                    imgs.append(_render(sr, glyphs[offset + c], image_size, cell, jitter, fg, bg, noise, stripes))
                    labels.append(c)
            order = sr.permutation(len(labels))
            splits[split_name] = Split(np.stack(imgs)[order], np.array(labels)[order])
        return Dataset(splits, count, name=name, label_names=list(range(offset, offset + count)))

    source = build(0, source_classes, source_per_class, source_style, "source", 1)
    target = build(source_classes, n_classes, n_per_class, target_style, "target", 2)
    return source, target
