"""Synthetic Gaussian-mixture data, federated partitions and straggler schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Literal

import numpy as np

from .config import MAX_PARTITION_RETRIES
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    means: np.ndarray
    n_classes: int
    seed: Any

    def __len__(self) -> int:
        return len(self.y)

    @property
    def histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    workers: int
    mode: Literal["iid", "dirichlet"] = "iid"
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise DataError("A partition needs at least one worker")
        if self.mode not in ("iid", "dirichlet"):
            raise DataError(f"Unknown partition mode {self.mode!r}")
        if self.beta <= 0:
            raise DataError(f"Dirichlet beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class StragglerSpec:
    fraction: float = 0.0
    straggler_epochs: int = 1
    regular_epochs: int = 5

    def __post_init__(self) -> None:
        if not 0 <= self.fraction <= 1:
            raise DataError(f"Straggler fraction must lie in [0, 1], got {self.fraction}")
        if not 1 <= self.straggler_epochs < self.regular_epochs:
            raise DataError("Stragglers must run fewer local epochs than regular workers")


@dataclass(frozen=True, eq=False)
class Shard:
    worker: int
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    histogram: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def generate(n: int, d: int, n_classes: int, separation: float, seed: Any) -> SyntheticDataset:
    """Balanced unit-variance Gaussian mixture whose class means are `separation` apart."""
    if n < n_classes or d < 1 or n_classes < 1:
        raise DataError(f"Invalid dataset sizes n={n}, d={d}, C={n_classes}")
    if separation <= 0:
        raise DataError("separation must be positive")
    rng = np.random.default_rng(seed)

    if n_classes <= d:
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        means = basis[:, :n_classes].T * (separation / math.sqrt(2.0))
    else:
        means = rng.normal(size=(n_classes, d))
        closest = min(np.linalg.norm(a - b) for a, b in combinations(means, 2))
        means *= separation / closest

    labels = np.arange(n) % n_classes
    labels = labels[rng.permutation(n)]
    X = means[labels] + rng.normal(size=(n, d))
    return SyntheticDataset(X, labels, means, n_classes, seed)


def _make_shards(ds: SyntheticDataset, parts: list[np.ndarray]) -> list[Shard]:
    shards = []
    for worker, idx in enumerate(parts):
        idx = np.sort(idx)
        y = ds.y[idx]
        shards.append(Shard(worker, idx, ds.X[idx], y, np.bincount(y, minlength=ds.n_classes)))
    return shards


def _dirichlet_parts(ds: SyntheticDataset, spec: PartitionSpec, rng: np.random.Generator) -> list[np.ndarray]:
    buckets: list[list[np.ndarray]] = [[] for _ in range(spec.workers)]
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.y == c)
        rng.shuffle(members)
        proportions = rng.dirichlet(np.full(spec.workers, spec.beta))
        cuts = (np.cumsum(proportions)[:-1] * len(members)).astype(int)
        for k, part in enumerate(np.split(members, cuts)):
            buckets[k].append(part)
    return [np.concatenate(b) for b in buckets]


def partition(ds: SyntheticDataset, spec: PartitionSpec, seed: Any, *, min_size: int = 1) -> list[Shard]:
    """Splits `ds` into disjoint worker shards covering every sample.

    Dirichlet draws are retried until every shard holds at least `min_size`
    samples (normally the batch size).
    """
    if len(ds) // spec.workers < min_size:
        raise DataError(f"{len(ds)} samples cannot give {spec.workers} workers {min_size} samples each")
    rng = np.random.default_rng(seed)
    for attempt in range(1, MAX_PARTITION_RETRIES + 1):
        if spec.mode == "iid":
            parts = np.array_split(rng.permutation(len(ds)), spec.workers)
        else:
            parts = _dirichlet_parts(ds, spec, rng)
        sizes = [len(p) for p in parts]
        if min(sizes) >= min_size:
            return _make_shards(ds, parts)
        logger.debug("Partition attempt %d left a shard with %d samples, redrawing", attempt, min(sizes))
    raise DataError(
        f"No {spec.mode} partition with {min_size}+ samples per shard after {MAX_PARTITION_RETRIES} draws"
    )


def assign_stragglers(workers: int, spec: StragglerSpec, seed: Any) -> dict[int, int]:
    """Local-epoch count per worker index; round(fraction·K) workers straggle (ties up)."""
    count = math.floor(spec.fraction * workers + 0.5)
    rng = np.random.default_rng(seed)
    stragglers = set(rng.choice(workers, size=count, replace=False).tolist()) if count else set()
    return {k: spec.straggler_epochs if k in stragglers else spec.regular_epochs for k in range(workers)}


def total_variation(hist: np.ndarray, reference: np.ndarray) -> float:
    p = np.asarray(hist, dtype=float)
    q = np.asarray(reference, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


def mean_total_variation(shards: list[Shard], ds: SyntheticDataset) -> float:
    return float(np.mean([total_variation(s.histogram, ds.histogram) for s in shards]))
