"""Hypervector encoding, class bundling, cosine classification and
perceptron-style adaptation.

Hypervectors are plain ``numpy`` int8 arrays whose entries are exactly -1 or
+1. A batch of hypervectors is a 2-D array with one row per point.

The projection matrix is drawn row-major from ``numpy.random.PCG64`` seeded
with the encoder seed, using ``Generator.standard_normal``; this pins the
matrix for a given (feature_dim, hd_dim, seed) on every platform numpy
supports.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hdseg.errors import ConfigError, ContractError, FormatError, UntrainedModelError

DEFAULT_EPSILON = 1e-12

MODEL_MAGIC = b"HSEG"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIII")

ENCODER_MAGIC = b"HENC"
ENCODER_VERSION = 1
_ENCODER_HEADER = struct.Struct("<4sIIIQd")

# Rows per matmul chunk when encoding; keeps the float64 intermediate < ~64 MB.
_ENCODE_BUDGET = 8_000_000


@dataclass(frozen=True, eq=False)
class Encoder:
    """Random-projection encoder ``z -> sign(normalize(z @ M))``."""

    feature_dim: int
    hd_dim: int
    seed: int
    epsilon: float
    projection: np.ndarray = field(repr=False)

    def to_bytes(self) -> bytes:
        return _ENCODER_HEADER.pack(
            ENCODER_MAGIC, ENCODER_VERSION, self.feature_dim, self.hd_dim, self.seed, self.epsilon
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Encoder:
        if len(data) != _ENCODER_HEADER.size:
            raise FormatError(f"encoder checkpoint must be {_ENCODER_HEADER.size} bytes, got {len(data)}")
        magic, version, feature_dim, hd_dim, seed, epsilon = _ENCODER_HEADER.unpack(data)
        if magic != ENCODER_MAGIC:
            raise FormatError(f"bad encoder magic {magic!r}")
        if version != ENCODER_VERSION:
            raise FormatError(f"unsupported encoder checkpoint version {version}")
        return build_encoder(feature_dim, hd_dim, seed, epsilon)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Encoder:
        return cls.from_bytes(Path(path).read_bytes())


def build_encoder(
    feature_dim: int, hd_dim: int, seed: int = 0, epsilon: float = DEFAULT_EPSILON
) -> Encoder:
    """Build an encoder with an N(0, 1) projection of shape (feature_dim, hd_dim).

    Raises:
        ConfigError: non-positive dimensions or epsilon, or a seed outside
            the unsigned 64-bit range.
    """
    if feature_dim < 1 or hd_dim < 1:
        raise ConfigError(f"dimensions must be positive, got feature_dim={feature_dim}, hd_dim={hd_dim}")
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise ConfigError(f"epsilon must be a finite positive number, got {epsilon}")
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    rng = np.random.Generator(np.random.PCG64(seed))
    projection = rng.standard_normal((feature_dim, hd_dim))
    projection.setflags(write=False)
    return Encoder(int(feature_dim), int(hd_dim), int(seed), float(epsilon), projection)


def _bipolar_sign(values: np.ndarray) -> np.ndarray:
    # sign(0) = +1 keeps every entry strictly bipolar
    out = (values >= 0).view(np.int8) * np.int8(2)
    out -= 1
    return out


def encode_batch(enc: Encoder, features: np.ndarray) -> np.ndarray:
    """Encode an (n, feature_dim) array into an (n, hd_dim) int8 bipolar array."""
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != enc.feature_dim:
        raise ContractError(f"expected features of shape (n, {enc.feature_dim}), got {z.shape}")
    if not np.isfinite(z).all():
        bad = int(np.argwhere(~np.isfinite(z))[0, 0])
        raise ContractError(f"non-finite feature value at row {bad}")
    out = np.empty((z.shape[0], enc.hd_dim), dtype=np.int8)
    step = max(1, _ENCODE_BUDGET // enc.hd_dim)
    for start in range(0, z.shape[0], step):
        hv = z[start : start + step] @ enc.projection
        norms = np.sqrt(np.einsum("ij,ij->i", hv, hv))
        hv /= np.maximum(norms, enc.epsilon)[:, None]
        out[start : start + step] = _bipolar_sign(hv)
    return out


def encode(enc: Encoder, z: np.ndarray) -> np.ndarray:
    """Encode one feature vector into a bipolar hypervector of length hd_dim."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError(f"expected a 1-D feature vector, got shape {z.shape}")
    return encode_batch(enc, z[None, :])[0]


@dataclass
class Prediction:
    label: int
    similarities: np.ndarray


def _denominators(sq_norms: np.ndarray, hd_dim: int) -> np.ndarray:
    """Cosine denominators ``sqrt(hd_dim) * ||c_j||``; inf marks zero-norm classes.

    Dividing a dot product by inf yields similarity 0 for untrained classes.
    Every similarity in this module goes through this helper, so the fast
    training path and the per-point operations agree bit for bit.
    """
    denom = math.sqrt(hd_dim) * np.sqrt(sq_norms.astype(np.float64))
    denom[sq_norms == 0] = np.inf
    return denom


def losses_from_similarities(similarities: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Perceptron loss per row: ``cos(pred) - cos(true)`` when mispredicted, else 0."""
    sims = np.asarray(similarities)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(sims.shape[0])
    pred = np.argmax(sims, axis=1)
    loss = sims[rows, pred] - sims[rows, labels]
    loss[pred == labels] = 0.0
    return loss


class ClassModel:
    """Per-class integer accumulator hypervectors with exact cached norms.

    Squared norms are maintained incrementally as int64, so ``norms`` always
    equals the L2 norm of the accumulators. Mutation follows a single-writer
    contract; concurrent readers are fine between mutations.
    """

    def __init__(self, num_classes: int, hd_dim: int):
        if num_classes < 1 or hd_dim < 1:
            raise ConfigError(f"num_classes and hd_dim must be positive, got {num_classes}, {hd_dim}")
        self.num_classes = int(num_classes)
        self.hd_dim = int(hd_dim)
        self.accumulators = np.zeros((num_classes, hd_dim), dtype=np.int32)
        self._sq_norms = np.zeros(num_classes, dtype=np.int64)

    @classmethod
    def from_accumulators(cls, accumulators: np.ndarray) -> ClassModel:
        acc = np.asarray(accumulators)
        if acc.ndim != 2:
            raise ContractError(f"accumulators must be 2-D, got shape {acc.shape}")
        model = cls(acc.shape[0], acc.shape[1])
        model.accumulators[:] = acc
        model._refresh_norms()
        return model

    def copy(self) -> ClassModel:
        return ClassModel.from_accumulators(self.accumulators)

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(self._sq_norms.astype(np.float64))

    @property
    def is_trained(self) -> bool:
        return bool(self._sq_norms.any())

    def _refresh_norms(self) -> None:
        acc = self.accumulators.astype(np.int64)
        self._sq_norms = np.einsum("ij,ij->i", acc, acc)

    def _check_hv(self, hv: np.ndarray) -> np.ndarray:
        hv = np.asarray(hv)
        if hv.shape[-1] != self.hd_dim:
            raise ContractError(f"hypervector length {hv.shape[-1]} != model hd_dim {self.hd_dim}")
        return hv

    def _check_label(self, label: int) -> int:
        if not 0 <= label < self.num_classes:
            raise ContractError(f"label {label} outside [0, {self.num_classes})")
        return int(label)

    # -- training --------------------------------------------------------

    def bundle(self, hv: np.ndarray, label: int) -> None:
        """Add ``hv`` into the accumulator of ``label``."""
        hv = self._check_hv(hv)
        label = self._check_label(label)
        self.accumulators[label] += hv.astype(np.int32)
        row = self.accumulators[label].astype(np.int64)
        self._sq_norms[label] = row @ row

    def bundle_many(self, hvs: np.ndarray, labels: np.ndarray) -> None:
        """Bundle a batch; equivalent to calling ``bundle`` row by row."""
        hvs = self._check_hv(hvs)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        for c in np.unique(labels):
            self.accumulators[c] += hvs[labels == c].sum(axis=0, dtype=np.int64).astype(np.int32)
        self._refresh_norms()

    # -- inference -------------------------------------------------------

    def similarities(self, hvs: np.ndarray) -> np.ndarray:
        """Cosine similarity of each row of ``hvs`` to every class, shape (n, C)."""
        hvs = self._check_hv(hvs)
        if not self.is_trained:
            raise UntrainedModelError("all class accumulators are zero")
        dots = np.atleast_2d(hvs).astype(np.float64) @ self.accumulators.T.astype(np.float64)
        return dots / _denominators(self._sq_norms, self.hd_dim)

    def predict(self, hvs: np.ndarray) -> np.ndarray:
        return np.argmax(self.similarities(hvs), axis=1)

    def classify(self, hv: np.ndarray) -> Prediction:
        sims = self.similarities(np.asarray(hv)[None, :])[0]
        return Prediction(int(np.argmax(sims)), sims)

    def point_loss(self, hv: np.ndarray, true_label: int) -> float:
        true_label = self._check_label(true_label)
        pred = self.classify(hv)
        if pred.label == true_label:
            return 0.0
        return float(pred.similarities[pred.label] - pred.similarities[true_label])

    def losses(self, hvs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Vectorized ``point_loss`` over a batch under the current model."""
        return losses_from_similarities(self.similarities(hvs), labels)

    # -- adaptation ------------------------------------------------------

    def adapt_update(self, hv: np.ndarray, true_label: int) -> bool:
        """Perceptron step; returns True iff the model changed."""
        true_label = self._check_label(true_label)
        pred = self.classify(hv).label
        if pred == true_label:
            return False
        self._move(np.asarray(hv).astype(np.int32), true_label, pred)
        return True

    def _move(self, hv32: np.ndarray, true_label: int, pred: int) -> None:
        acc = self.accumulators
        dot_true = int(acc[true_label].astype(np.int64) @ hv32)
        dot_pred = int(acc[pred].astype(np.int64) @ hv32)
        acc[true_label] += hv32
        acc[pred] -= hv32
        # ||c ± h||^2 = ||c||^2 ± 2<c, h> + D for bipolar h
        self._sq_norms[true_label] += 2 * dot_true + self.hd_dim
        self._sq_norms[pred] += -2 * dot_pred + self.hd_dim

    def train_pass(self, hvs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, int]:
        """Apply ``adapt_update`` to every row in order.

        Returns the per-point loss observed just before each point's update
        and the number of updates made. The result is identical to a Python
        loop over ``point_loss`` + ``adapt_update``; dot products are kept as
        exact integers in float64 and patched after each update instead of
        being recomputed.
        """
        hvs = self._check_hv(hvs)
        labels = np.asarray(labels, dtype=np.int64)
        n = hvs.shape[0]
        if labels.shape != (n,):
            raise ContractError(f"expected {n} labels, got shape {labels.shape}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if n and not self.is_trained:
            raise UntrainedModelError("all class accumulators are zero")

        losses = np.zeros(n, dtype=np.float64)
        acc64 = self.accumulators.astype(np.float64)
        denom = _denominators(self._sq_norms, self.hd_dim)
        updates = 0
        chunk = 256
        start = 0
        while start < n:
            stop = min(n, start + chunk)
            block = hvs[start:stop].astype(np.float64)
            dots = block @ acc64.T
            y = labels[start:stop]
            i = 0
            mistakes = 0
            while i < len(y):
                sims = dots[i:] / denom
                pred = np.argmax(sims, axis=1)
                wrong = np.flatnonzero(pred != y[i:])
                if wrong.size == 0:
                    break
                i += int(wrong[0])
                t, p = int(y[i]), int(pred[wrong[0]])
                losses[start + i] = sims[wrong[0], p] - sims[wrong[0], t]
                h = block[i]
                self._move(hvs[start + i].astype(np.int32), t, p)
                acc64[t] += h
                acc64[p] -= h
                denom = _denominators(self._sq_norms, self.hd_dim)
                if start + i + 1 < n and not self.is_trained:
                    raise UntrainedModelError("updates cancelled every class accumulator")
                if i + 1 < len(y):
                    delta = block[i + 1 :] @ h
                    dots[i + 1 :, t] += delta
                    dots[i + 1 :, p] -= delta
                mistakes += 1
                updates += 1
                i += 1
            # patching costs O(rest * D) per mistake; shrink chunks when mistakes are common
            rate = mistakes / (stop - start)
            chunk = int(np.clip(2 * self.num_classes / max(rate, 1e-3), 16, 2048))
            start = stop
        return losses, updates

    # -- persistence -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, self.num_classes, self.hd_dim)
        return header + self.accumulators.astype("<i4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> ClassModel:
        if len(data) < _MODEL_HEADER.size:
            raise FormatError("model checkpoint shorter than its header")
        magic, version, num_classes, hd_dim = _MODEL_HEADER.unpack_from(data)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model checkpoint version {version}")
        expected = _MODEL_HEADER.size + 4 * num_classes * hd_dim
        if len(data) != expected:
            raise FormatError(f"model checkpoint is {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data, dtype="<i4", offset=_MODEL_HEADER.size)
        return cls.from_accumulators(body.reshape(num_classes, hd_dim))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ClassModel:
        return cls.from_bytes(Path(path).read_bytes())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassModel):
            return NotImplemented
        return np.array_equal(self.accumulators, other.accumulators)

    def __repr__(self) -> str:
        return f"ClassModel(num_classes={self.num_classes}, hd_dim={self.hd_dim})"
