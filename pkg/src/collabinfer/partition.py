"""Class-wise Dirichlet label-skew partitioning across clients."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PartitionInfeasible
from .nn import LabeledDataset

ALPHA_GRID: tuple[float, ...] = (0.05, 0.1, 0.3, 0.5, 1000.0)
MAX_REDRAWS = 100


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float
    clients: int
    seed: int | None = 0
    min_samples_per_client: int = 2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.clients < 2:
            raise ValueError(f"need at least 2 clients, got {self.clients}")
        if self.min_samples_per_client < 0:
            raise ValueError("min_samples_per_client must be non-negative")


def _split_once(labels: np.ndarray, classes: np.ndarray, cfg: PartitionConfig,
                rng: np.random.Generator) -> list[np.ndarray]:
    buckets: list[list[np.ndarray]] = [[] for _ in range(cfg.clients)]
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        # Dirichlet(alpha * 1) as normalised Gamma(alpha) draws
        g = rng.gamma(cfg.alpha, size=cfg.clients)
        props = g / g.sum() if g.sum() > 0 else np.full(cfg.clients, 1.0 / cfg.clients)
        cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].append(part)
    return [np.sort(np.concatenate(b)) for b in buckets]


def dirichlet_indices(labels: np.ndarray, cfg: PartitionConfig) -> list[np.ndarray]:
    """Per-client index arrays; disjoint and covering ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(MAX_REDRAWS):
        parts = _split_once(labels, classes, cfg, rng)
        if min(len(p) for p in parts) >= cfg.min_samples_per_client:
            return parts
    raise PartitionInfeasible(
        f"no split with >= {cfg.min_samples_per_client} samples per client after {MAX_REDRAWS} draws")


def dirichlet_partition(dataset: LabeledDataset, cfg: PartitionConfig) -> list[LabeledDataset]:
    return [dataset.subset(idx) for idx in dirichlet_indices(dataset.labels, cfg)]


def label_histograms(parts: list[LabeledDataset], num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(p.labels, minlength=num_classes) for p in parts])


def mean_pairwise_tv(hist: np.ndarray) -> float:
    """Mean total-variation distance between client label distributions."""
    h = np.asarray(hist, dtype=np.float64)
    dist = h / np.clip(h.sum(axis=1, keepdims=True), 1, None)
    k = len(dist)
    vals = [0.5 * np.abs(dist[i] - dist[j]).sum() for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(vals))


def write_partition(parts: list[LabeledDataset], cfg: PartitionConfig, out_dir: str | Path) -> Path:
    """Write client_<k>.csv files plus a JSON label-histogram manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = max(p.num_classes for p in parts)
    hist = label_histograms(parts, num_classes)
    for k, part in enumerate(parts):
        part.to_csv(out / f"client_{k}.csv")
    manifest = {
        "alpha": cfg.alpha,
        "clients": cfg.clients,
        "seed": cfg.seed,
        "min_samples_per_client": cfg.min_samples_per_client,
        "sizes": [len(p) for p in parts],
        "label_histograms": hist.tolist(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
