"""Poincaré-ball projection of encoder embeddings and Recall@K."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# metadata attached to every 2-D export: the reduction is PCA, not UMAP
REDUCTION_NOTE = "2-D coordinates: PCA to 2 dims, then exponential map at the origin (UMAP substitute)"


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    source: str = "visual+kv"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ValueError(f"vectors {self.vectors.shape} and labels {self.labels.shape} disagree")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding vectors must be finite")


def poincare_project(x: np.ndarray, c: float = 1.0) -> np.ndarray:
    """Exponential map at the origin: tanh(sqrt(c)|x|) x / (sqrt(c)|x|).

    Works row-wise on a matrix.  The result is clipped just inside the ball
    because tanh rounds to exactly 1 for large arguments.
    """
    x = np.asarray(x, dtype=np.float64)
    if c <= 0:
        raise ValueError("curvature c must be positive")
    if not np.isfinite(x).all():
        raise ValueError("poincare_project needs finite input")
    sc = np.sqrt(c)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, np.tanh(sc * norm) * x / (sc * safe), 0.0)
    limit = (1.0 - 1e-15) / sc
    ynorm = np.linalg.norm(y, axis=-1, keepdims=True)
    return np.where(ynorm >= limit, y * (limit / np.where(ynorm > 0, ynorm, 1.0)), y)


def poincare_distance(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2))), broadcasting over leading axes."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    diff = ((u - v) ** 2).sum(-1)
    den = (1.0 - (u * u).sum(-1)) * (1.0 - (v * v).sum(-1))
    return np.arccosh(1.0 + 2.0 * diff / den)


def pairwise_distances(x: np.ndarray, metric: str = "euclidean", chunk: int = 256) -> np.ndarray:
    """All-pairs distances from explicit differences (no |a|^2 + |b|^2 - 2ab cancellation)."""
    if metric not in ("euclidean", "poincare"):
        raise ValueError(f"unknown metric {metric!r}")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    out = np.empty((n, n))
    sq = (x * x).sum(1)
    for lo in range(0, n, chunk):
        d2 = ((x[lo:lo + chunk, None, :] - x[None, :, :]) ** 2).sum(-1)
        if metric == "euclidean":
            out[lo:lo + chunk] = np.sqrt(d2)
        else:
            den = (1.0 - sq[lo:lo + chunk])[:, None] * (1.0 - sq)[None, :]
            out[lo:lo + chunk] = np.arccosh(1.0 + 2.0 * d2 / den)
    return out


def recall_at_k(emb: EmbeddingSet, k: int, metric: str = "euclidean") -> float:
    """Fraction of queries whose k nearest neighbours (self excluded) share their label.

    Queries whose class has no other member are left out of the denominator.
    Distance ties are resolved by lower sample index.
    """
    n = len(emb.labels)
    if n < 2:
        raise ValueError("recall_at_k needs at least 2 samples")
    if not 1 <= k < n:
        raise ValueError(f"K must satisfy 1 <= K < n (K={k}, n={n})")
    dist = pairwise_distances(emb.vectors, metric)
    np.fill_diagonal(dist, np.inf)
    labels = emb.labels
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    valid = counts[inverse] >= 2
    skipped = int((~valid).sum())
    if skipped:
        log.warning("recall_at_k: %d singleton-class samples excluded", skipped)
    if not valid.any():
        raise ValueError("no sample has a same-label neighbour")
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
    hit = (labels[nn] == labels[:, None]).any(axis=1)
    return float(hit[valid].mean())


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    proj = xc @ vt[:2].T
    # sign convention: largest-magnitude loading of each component is positive
    signs = np.sign(vt[:2][np.arange(min(2, len(vt))), np.abs(vt[:2]).argmax(axis=1)])
    proj = proj * np.where(signs == 0, 1.0, signs)
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def disk_coordinates(emb: EmbeddingSet, c: float = 1.0, scale: float | None = None) -> np.ndarray:
    """PCA to 2-D, rescaled to unit RMS radius, then projected into the Poincaré disk."""
    xy = pca_2d(emb.vectors)
    if scale is None:
        rms = np.sqrt((xy ** 2).sum(1).mean())
        scale = 1.0 / rms if rms > 0 else 1.0
    return poincare_project(xy * scale, c)


def border_stats(points: np.ndarray) -> dict:
    r = np.linalg.norm(points, axis=1)
    return {"mean_radius": float(r.mean()), "median_radius": float(np.median(r)),
            "mean_border_distance": float((1.0 - r).mean())}


def to_csv(points: np.ndarray, labels: np.ndarray, source: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label", "source"])
    for (x, y), lab in zip(points, labels):
        w.writerow([repr(float(x)), repr(float(y)), int(lab), source])
    return buf.getvalue()


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf"]


def to_svg(points: np.ndarray, labels: np.ndarray, title: str = "", size: int = 400) -> str:
    half = size / 2
    r = half - 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f"<!-- {REDUCTION_NOTE} -->",
             f'<circle cx="{half}" cy="{half}" r="{r}" fill="none" stroke="black" stroke-width="1"/>']
    if title:
        parts.append(f'<text x="8" y="16" font-size="12">{title}</text>')
    for (x, y), lab in zip(points, labels):
        color = _PALETTE[int(lab) % len(_PALETTE)]
        parts.append(f'<circle cx="{half + x * r:.2f}" cy="{half - y * r:.2f}" r="2.5" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
