"""Loss-ranked buffer selection for retraining epochs.

Each retraining epoch trains on ``k%`` of the points: half are the points
with the highest stored loss, half a seeded uniform draw from the rest.
Losses are only refreshed for points that were in the buffer; everything
else keeps its last value.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from hdseg.errors import ConfigError, ContractError, StateError
from hdseg.hdc import encode_batch

SCOPES = ("epoch", "batch")


@dataclass(frozen=True)
class BufferConfig:
    ratio_percent: float = 5.0
    seed: int = 0
    # "epoch": candidates are the whole stream; "batch": each batch of scans separately
    scope: str = "epoch"

    def __post_init__(self):
        if not (0 < self.ratio_percent <= 100):
            raise ConfigError(f"buffer ratio must be in (0, 100], got {self.ratio_percent}")
        if self.scope not in SCOPES:
            raise ConfigError(f"buffer scope must be one of {SCOPES}, got {self.scope!r}")


@dataclass
class BufferSelection:
    hard_indices: np.ndarray
    random_indices: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        """All selected indices in ascending (stream) order."""
        return np.union1d(self.hard_indices, self.random_indices)

    def __len__(self) -> int:
        return len(self.hard_indices) + len(self.random_indices)


@dataclass
class LossStore:
    losses: np.ndarray
    initialized: bool = False

    @classmethod
    def empty(cls, size: int) -> LossStore:
        return cls(np.zeros(size, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.losses)

    def initialize(self, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != self.losses.shape:
            raise ContractError(f"expected {len(self)} losses, got shape {losses.shape}")
        _check_losses(losses)
        self.losses[:] = losses
        self.initialized = True

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point_index", "loss"])
            for i, loss in enumerate(self.losses.tolist()):
                writer.writerow([i, repr(loss)])


def _check_losses(values: np.ndarray) -> None:
    if values.size and not (np.isfinite(values).all() and values.min() >= 0):
        raise ContractError("losses must be finite and non-negative")


def half_count(n: int, ratio_percent: float) -> int:
    """``floor(n * 0.5k / 100)`` evaluated exactly on the decimal ratio."""
    return math.floor(n * Fraction(repr(float(ratio_percent))) / 200)


def init_losses(store: LossStore, model, dataset, encoder) -> None:
    """Fill ``store`` with the current model's loss for every point of ``dataset``."""
    if len(store) != len(dataset):
        raise ContractError(f"store holds {len(store)} points, dataset has {len(dataset)}")
    losses = np.empty(len(dataset), dtype=np.float64)
    step = 4096
    for start in range(0, len(dataset), step):
        stop = start + step
        hvs = encode_batch(encoder, dataset.features[start:stop])
        losses[start:stop] = model.losses(hvs, dataset.labels[start:stop])
    store.initialize(losses)


def top_losses(losses: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest losses, ties broken by lower index, sorted ascending.

    Uses a partition to find the m-th largest value instead of a full sort.
    """
    n = len(losses)
    if m <= 0:
        return np.empty(0, dtype=np.int64)
    if m >= n:
        return np.arange(n, dtype=np.int64)
    threshold = np.partition(losses, n - m)[n - m]
    above = np.flatnonzero(losses > threshold)
    ties = np.flatnonzero(losses == threshold)[: m - above.size]
    return np.sort(np.concatenate([above, ties]))


def select(
    store: LossStore, cfg: BufferConfig, epoch: int, candidates: np.ndarray | None = None
) -> BufferSelection:
    """Pick the hard and random halves of the buffer.

    Args:
        store: initialized loss store.
        cfg: ratio and seed.
        epoch: mixed into the random draw so each epoch differs reproducibly.
        candidates: restrict the pool to these store indices (batch scope).
            Defaults to every point.
    """
    if not store.initialized:
        raise StateError("loss store has not been initialized")
    if not (0 < cfg.ratio_percent <= 100):
        raise ConfigError(f"buffer ratio must be in (0, 100], got {cfg.ratio_percent}")
    pool = np.arange(len(store), dtype=np.int64) if candidates is None else np.asarray(candidates, dtype=np.int64)
    n = len(pool)
    m = half_count(n, cfg.ratio_percent)
    hard = pool[top_losses(store.losses[pool], m)]
    rest = np.setdiff1d(pool, hard, assume_unique=True)
    # at k=100 the random half takes the whole remainder so odd n is still fully covered
    n_random = len(rest) if cfg.ratio_percent == 100 else min(m, len(rest))
    seed_words = [cfg.seed, epoch] if candidates is None else [cfg.seed, epoch, int(pool[0]) if n else 0]
    rng = np.random.default_rng(seed_words)
    random = np.sort(rng.choice(rest, size=n_random, replace=False)) if n_random else rest[:0]
    return BufferSelection(hard, random)


def record_losses(
    store: LossStore,
    selection: BufferSelection,
    updates: Mapping[int, float] | tuple[np.ndarray, np.ndarray],
) -> None:
    """Overwrite stored losses for buffer points only.

    ``updates`` is either an index -> loss mapping or a pair of parallel
    (indices, losses) arrays.
    """
    if isinstance(updates, Mapping):
        indices = np.fromiter(updates.keys(), dtype=np.int64, count=len(updates))
        values = np.fromiter(updates.values(), dtype=np.float64, count=len(updates))
    else:
        indices = np.asarray(updates[0], dtype=np.int64)
        values = np.asarray(updates[1], dtype=np.float64)
        if indices.shape != values.shape:
            raise ContractError("index and loss arrays differ in length")
    if indices.size == 0:
        return
    outside = ~np.isin(indices, selection.indices)
    if outside.any():
        raise ContractError(f"index {int(indices[outside][0])} is not in the current buffer")
    _check_losses(values)
    store.losses[indices] = values
