"""Pre-deployment training, buffered post-deployment adaptation and evaluation.

Update order is fixed: scans in stream order, points in file order within a
scan. Perceptron updates are order dependent, so this order is part of the
reproducibility contract.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hdseg.buffer import BufferConfig, BufferSelection, LossStore, record_losses, select
from hdseg.data import LabeledFeatureSet
from hdseg.errors import ConfigError, ContractError
from hdseg.hdc import DEFAULT_EPSILON, ClassModel, Encoder, build_encoder, encode_batch
from hdseg.metrics import ConfusionMatrix, iou, measure_fps

log = logging.getLogger(__name__)

_EVAL_CHUNK = 4096


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters shared by all three stages.

    ``buffer=None`` means full-data retraining epochs.
    """

    num_classes: int = 6
    feature_dim: int = 16
    hd_dim: int = 10_000
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    batch_size: int = 6
    retrain_epochs: int = 10
    buffer: BufferConfig | None = field(default_factory=BufferConfig)
    cache_hypervectors: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.retrain_epochs < 0:
            raise ConfigError(f"retrain_epochs must be >= 0, got {self.retrain_epochs}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feature_dim < 1 or self.hd_dim < 1:
            raise ConfigError(f"dimensions must be >= 1, got p={self.feature_dim}, D={self.hd_dim}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class EpochRecord:
    epoch: int
    miou: float
    per_class_iou: np.ndarray
    points_processed: int
    wall_time: float


@dataclass
class AdaptationReport:
    epoch_records: list[EpochRecord]
    final_model: ClassModel
    throughput_fps: float
    num_scans: int

    @property
    def final_miou(self) -> float:
        return self.epoch_records[-1].miou

    @property
    def retrain_time(self) -> float:
        """Wall time summed over retraining epochs (epoch 0 excluded)."""
        return sum(r.wall_time for r in self.epoch_records[1:])

    @property
    def retrain_fps(self) -> float:
        """Scans per second over the retraining epochs; falls back to epoch 0 when there are none."""
        records = self.epoch_records[1:] or self.epoch_records
        wall = sum(r.wall_time for r in records)
        return measure_fps(self.num_scans * len(records), 0, wall).fps

    def to_csv(self, path: str | Path) -> None:
        write_records_csv(path, self.epoch_records, self.throughput_fps)


def write_records_csv(path: str | Path, records: list[EpochRecord], throughput_fps: float | None = None) -> None:
    num_classes = len(records[0].per_class_iou) if records else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "miou", *[f"iou_class_{c}" for c in range(num_classes)], "points_processed", "wall_time_s"]
        )
        for r in records:
            writer.writerow(
                [r.epoch, repr(r.miou), *[repr(float(v)) for v in r.per_class_iou], r.points_processed, repr(r.wall_time)]
            )
        if throughput_fps is not None:
            fh.write(f"# throughput_fps={throughput_fps!r}\n")


class _Workers:
    """Fans per-point encoding out over a thread pool; single-threaded when threads == 1."""

    def __init__(self, threads: int):
        self.threads = threads
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def __enter__(self) -> _Workers:
        return self

    def __exit__(self, *exc) -> None:
        if self.pool is not None:
            self.pool.shutdown()

    def encode(self, encoder: Encoder, features: np.ndarray) -> np.ndarray:
        if self.pool is None or len(features) < 2 * self.threads:
            return encode_batch(encoder, features)
        parts = np.array_split(features, self.threads)
        return np.concatenate(list(self.pool.map(lambda f: encode_batch(encoder, f), parts)))


def _check_dims(cfg: StageConfig, encoder: Encoder, model: ClassModel, data: LabeledFeatureSet) -> None:
    if encoder.hd_dim != model.hd_dim:
        raise ContractError(f"encoder hd_dim {encoder.hd_dim} != model hd_dim {model.hd_dim}")
    if data.feature_dim != encoder.feature_dim:
        raise ContractError(f"data feature_dim {data.feature_dim} != encoder feature_dim {encoder.feature_dim}")
    if model.num_classes != cfg.num_classes:
        raise ContractError(f"model has {model.num_classes} classes, config says {cfg.num_classes}")
    if len(data) and data.labels.max() >= cfg.num_classes:
        raise ContractError(f"label {int(data.labels.max())} outside [0, {cfg.num_classes})")


def _full_pass(cfg, encoder, model, data, pool, cache=None) -> np.ndarray:
    """One perceptron epoch over every point; returns the pre-update losses."""
    losses = np.empty(len(data), dtype=np.float64)
    for start, stop in data.batch_ranges(cfg.batch_size):
        if cache is not None and cache.get("filled"):
            hvs = cache["hvs"][start:stop]
        else:
            hvs = pool.encode(encoder, data.features[start:stop])
            if cache is not None:
                cache["hvs"][start:stop] = hvs
        losses[start:stop], _ = model.train_pass(hvs, data.labels[start:stop])
    if cache is not None:
        cache["filled"] = True
    return losses


def _new_cache(cfg: StageConfig, data: LabeledFeatureSet) -> dict | None:
    if not cfg.cache_hypervectors:
        return None
    return {"hvs": np.empty((len(data), cfg.hd_dim), dtype=np.int8), "filled": False}


def pretrain(cfg: StageConfig, data: LabeledFeatureSet) -> tuple[Encoder, ClassModel]:
    """Bundle every point into its class, then run ``retrain_epochs`` full-data perceptron epochs."""
    data = data.without_ignored()
    if len(data) == 0:
        raise ConfigError("pre-training data is empty")
    encoder = build_encoder(cfg.feature_dim, cfg.hd_dim, cfg.seed, cfg.epsilon)
    model = ClassModel(cfg.num_classes, cfg.hd_dim)
    _check_dims(cfg, encoder, model, data)
    cache = _new_cache(cfg, data)
    with _Workers(cfg.threads) as pool:
        for start, stop in data.batch_ranges(cfg.batch_size):
            hvs = pool.encode(encoder, data.features[start:stop])
            if cache is not None:
                cache["hvs"][start:stop] = hvs
            model.bundle_many(hvs, data.labels[start:stop])
        if cache is not None:
            cache["filled"] = True
        for epoch in range(1, cfg.retrain_epochs + 1):
            t0 = time.perf_counter()
            _full_pass(cfg, encoder, model, data, pool, cache)
            log.info("pretrain epoch %d done in %.2fs", epoch, time.perf_counter() - t0)
    return encoder, model


def _buffer_selection(
    cfg: StageConfig, store: LossStore, data: LabeledFeatureSet, epoch: int
) -> tuple[BufferSelection, np.ndarray]:
    buf = cfg.buffer
    if buf.scope == "epoch":
        sel = select(store, buf, epoch)
        return sel, sel.indices
    parts = [select(store, buf, epoch, np.arange(a, b)) for a, b in data.batch_ranges(cfg.batch_size)]
    hard = np.concatenate([s.hard_indices for s in parts])
    rand = np.concatenate([s.random_indices for s in parts])
    sel = BufferSelection(hard, rand)
    return sel, sel.indices


def adapt(
    cfg: StageConfig,
    encoder: Encoder,
    model: ClassModel,
    stream: LabeledFeatureSet,
    test: LabeledFeatureSet,
) -> AdaptationReport:
    """Adapt a copy of ``model`` on ``stream``; evaluate on ``test`` after every epoch.

    Epoch 0 trains on every point and records each point's loss just before
    its update. Each later epoch trains on a fresh buffer (or on everything
    when ``cfg.buffer`` is None), in stream order, and then refreshes the
    stored losses of the buffered points under the updated model.
    """
    stream = stream.without_ignored()
    if len(stream) == 0:
        raise ConfigError("adaptation stream is empty")
    _check_dims(cfg, encoder, model, stream)
    model = model.copy()
    cache = _new_cache(cfg, stream)
    records = []
    with _Workers(cfg.threads) as pool:
        t0 = time.perf_counter()
        initial = _full_pass(cfg, encoder, model, stream, pool, cache)
        store = None
        if cfg.buffer is not None:
            store = LossStore.empty(len(stream))
            store.initialize(initial)
        wall = time.perf_counter() - t0
        records.append(_record(0, evaluate(encoder, model, test, threads=cfg.threads), len(stream), wall))

        for epoch in range(1, cfg.retrain_epochs + 1):
            t0 = time.perf_counter()
            if store is None:
                _full_pass(cfg, encoder, model, stream, pool, cache)
                processed = len(stream)
            else:
                processed = _buffered_epoch(cfg, encoder, model, stream, store, epoch, pool, cache)
            wall = time.perf_counter() - t0
            records.append(_record(epoch, evaluate(encoder, model, test, threads=cfg.threads), processed, wall))
            log.info("adapt epoch %d: miou=%.4f points=%d %.3fs", epoch, records[-1].miou, processed, wall)

    total_wall = sum(r.wall_time for r in records)
    fps = measure_fps(stream.num_scans * len(records), len(stream), total_wall).fps
    return AdaptationReport(records, model, fps, stream.num_scans)


def _buffered_epoch(cfg, encoder, model, stream, store, epoch, pool, cache) -> int:
    sel, idx = _buffer_selection(cfg, store, stream, epoch)
    if idx.size == 0:
        return 0
    if cache is not None:
        hvs = cache["hvs"][idx]
    else:
        hvs = np.empty((len(idx), cfg.hd_dim), dtype=np.int8)
    labels = stream.labels[idx]
    # train batch by batch so the update order matches a full pass restricted to the buffer
    for start, stop in stream.batch_ranges(cfg.batch_size):
        lo, hi = np.searchsorted(idx, [start, stop])
        if lo == hi:
            continue
        if cache is None:
            hvs[lo:hi] = pool.encode(encoder, stream.features[idx[lo:hi]])
        model.train_pass(hvs[lo:hi], labels[lo:hi])
    record_losses(store, sel, (idx, model.losses(hvs, labels)))
    return len(idx)


def _record(epoch: int, rec: EpochRecord, processed: int, wall: float) -> EpochRecord:
    return EpochRecord(epoch, rec.miou, rec.per_class_iou, processed, wall)


def evaluate(
    encoder: Encoder, model: ClassModel, test: LabeledFeatureSet, *, epoch: int = 0, threads: int = 1
) -> EpochRecord:
    """Classify every test point and report IoU; the model is not modified.

    ``points_processed`` is the number of evaluated points and ``wall_time``
    the evaluation time.
    """
    test = test.without_ignored()
    if len(test) == 0:
        raise ConfigError("test set is empty")
    if test.feature_dim != encoder.feature_dim or encoder.hd_dim != model.hd_dim:
        raise ContractError("encoder, model and test data dimensions disagree")
    t0 = time.perf_counter()

    def shard(start: int) -> ConfusionMatrix:
        cm = ConfusionMatrix(model.num_classes)
        hvs = encode_batch(encoder, test.features[start : start + _EVAL_CHUNK])
        cm.accumulate_batch(test.labels[start : start + _EVAL_CHUNK], model.predict(hvs))
        return cm

    starts = range(0, len(test), _EVAL_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            shards = list(pool.map(shard, starts))
    else:
        shards = [shard(s) for s in starts]
    cm = shards[0]
    for other in shards[1:]:
        cm = cm + other
    per_class, miou = iou(cm)
    return EpochRecord(epoch, miou, per_class, len(test), time.perf_counter() - t0)

