"""Scan ingestion, feature extraction and the synthetic drift benchmark.

On-disk formats:

* KITTI velodyne ``.bin``: little-endian float32 (x, y, z, remission), 16 bytes per point.
* KITTI ``.label``: little-endian uint32 per point; low 16 bits semantic class,
  high 16 bits instance id.
* Feature file (``.hfea``): header ``"HFEA"``, version u32, point_count u32,
  feature_dim u32, then point_count * feature_dim float32, then point_count
  uint16 labels, all little-endian. Label ``0xFFFF`` is the ignore sentinel.
* Class remap: text lines ``raw_label contiguous_index``; ``#`` starts a comment.

A stage directory holds either one ``.hfea`` file per scan (sorted by name)
or a KITTI sequence layout (``velodyne/*.bin`` plus ``labels/*.label``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from hdseg.errors import ConfigError, ContractError, FormatError

IGNORE_LABEL = -1
_FILE_IGNORE = 0xFFFF

FEATURE_MAGIC = b"HFEA"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

BASE_FEATURES = ("x", "y", "z", "intensity", "range", "azimuth", "elevation", "z_height")


@dataclass
class PointCloudScan:
    points: np.ndarray  # (n, 4) float32: x, y, z, intensity
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ContractError(f"points must have shape (n, 4), got {self.points.shape}")
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ContractError(f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class LabeledFeatureSet:
    """Flat per-point features and labels for one stage, grouped into scans.

    ``scan_boundaries`` holds the exclusive end offset of every scan, so the
    last entry equals the total point count.
    """

    features: np.ndarray
    labels: np.ndarray
    scan_boundaries: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.scan_boundaries is None:
            self.scan_boundaries = np.array([n] if n else [], dtype=np.int64)
        self.scan_boundaries = np.asarray(self.scan_boundaries, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractError(f"features {self.features.shape} do not match {n} labels")
        b = self.scan_boundaries
        if n and (b.size == 0 or b[-1] != n or b[0] <= 0 or np.any(np.diff(b) <= 0)):
            raise ContractError("scan boundaries must be strictly increasing and end at the point count")
        if not n and b.size:
            raise ContractError("an empty feature set cannot have scan boundaries")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_scans(self) -> int:
        return len(self.scan_boundaries)

    def scan_starts(self) -> np.ndarray:
        return np.concatenate([[0], self.scan_boundaries[:-1]]).astype(np.int64)

    def batch_ranges(self, batch_size: int) -> Iterator[tuple[int, int]]:
        """Yield (start, stop) point offsets covering ``batch_size`` scans each."""
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        starts = self.scan_starts()
        for i in range(0, self.num_scans, batch_size):
            last = min(i + batch_size, self.num_scans) - 1
            yield int(starts[i]), int(self.scan_boundaries[last])

    def without_ignored(self) -> LabeledFeatureSet:
        """Drop ignore-sentinel points; scans left empty disappear."""
        keep = self.labels != IGNORE_LABEL
        if keep.all():
            return self
        kept_per_scan = np.add.reduceat(keep.astype(np.int64), self.scan_starts()) if len(self) else []
        ends = np.cumsum(kept_per_scan)
        ends = ends[np.asarray(kept_per_scan) > 0]
        return LabeledFeatureSet(self.features[keep], self.labels[keep], ends)

    def scan(self, i: int) -> LabeledFeatureSet:
        start, stop = int(self.scan_starts()[i]), int(self.scan_boundaries[i])
        return LabeledFeatureSet(self.features[start:stop], self.labels[start:stop])

    @classmethod
    def concatenate(cls, parts: Sequence[LabeledFeatureSet]) -> LabeledFeatureSet:
        if not parts:
            raise ContractError("nothing to concatenate")
        offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.scan_boundaries + off for p, off in zip(parts, offsets)]),
        )


# -- KITTI ---------------------------------------------------------------


def parse_kitti_bin(data: bytes) -> PointCloudScan:
    if len(data) % 16:
        raise FormatError(f"velodyne data length {len(data)} is not a multiple of 16")
    points = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        raise FormatError(f"non-finite value at point {int(np.flatnonzero(~finite)[0])}")
    return PointCloudScan(points)


def serialize_kitti_bin(scan: PointCloudScan) -> bytes:
    return scan.points.astype("<f4").tobytes()


def decode_label_words(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split ``.label`` words into (semantic, instance) uint16 arrays."""
    if len(data) % 4:
        raise FormatError(f"label data length {len(data)} is not a multiple of 4")
    words = np.frombuffer(data, dtype="<u4")
    return (words & 0xFFFF).astype(np.uint16), (words >> 16).astype(np.uint16)


def encode_label_words(semantic: np.ndarray, instance: np.ndarray) -> bytes:
    words = np.asarray(semantic, dtype=np.uint32) | (np.asarray(instance, dtype=np.uint32) << 16)
    return words.astype("<u4").tobytes()


def remap_labels(raw: np.ndarray, class_remap: Mapping[int, int]) -> np.ndarray:
    """Map raw semantic ids to contiguous classes; unmapped ids become ``IGNORE_LABEL``."""
    table = np.full(1 << 16, IGNORE_LABEL, dtype=np.int64)
    for src, dst in class_remap.items():
        table[src] = dst
    return table[np.asarray(raw, dtype=np.int64)]


def parse_kitti_label(data: bytes, scan: PointCloudScan, class_remap: Mapping[int, int]) -> PointCloudScan:
    if len(data) != 4 * len(scan):
        raise FormatError(f"label data holds {len(data) // 4} entries for a {len(scan)}-point scan")
    semantic, _instance = decode_label_words(data)
    return PointCloudScan(scan.points, remap_labels(semantic, class_remap))


def parse_class_remap(text: str) -> dict[int, int]:
    remap = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"class remap line {lineno}: expected 'raw_label index', got {line!r}")
        try:
            raw, idx = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"class remap line {lineno}: non-integer value in {line!r}") from None
        if not (0 <= raw < 1 << 16 and idx >= 0):
            raise FormatError(f"class remap line {lineno}: value out of range in {line!r}")
        remap[raw] = idx
    return remap


# -- feature extraction ----------------------------------------------------


def extract_geometric_features(scan: PointCloudScan, feature_dim: int = 16) -> np.ndarray:
    """Hand-crafted per-point features standing in for a learned extractor.

    The first eight columns are x, y, z, intensity, range, azimuth,
    elevation and height above the scan's lowest point. Further columns are
    ``sin(h * base[i] + 0.25 * i)`` with ``i = j % 8`` and ``h = j // 8``.
    Azimuth and elevation are 0 at the origin.
    """
    if len(scan) == 0:
        raise ContractError("cannot extract features from an empty scan")
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be positive, got {feature_dim}")
    p = scan.points.astype(np.float64)
    x, y, z, intensity = p.T
    planar = np.hypot(x, y)
    rng = np.sqrt(x * x + y * y + z * z)
    azimuth = np.where(planar > 0, np.arctan2(y, x), 0.0)
    elevation = np.where(rng > 0, np.arctan2(z, planar), 0.0)
    base = np.stack([x, y, z, intensity, rng, azimuth, elevation, z - z.min()], axis=1)
    cols = []
    for j in range(feature_dim):
        i, h = j % 8, j // 8
        cols.append(base[:, i] if h == 0 else np.sin(h * base[:, i] + 0.25 * i))
    return np.stack(cols, axis=1).astype(np.float32)


# -- feature files -----------------------------------------------------------


def feature_file_bytes(features: np.ndarray, labels: np.ndarray) -> bytes:
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ContractError(f"features {features.shape} do not match {len(labels)} labels")
    if labels.size and (labels.max() >= _FILE_IGNORE or labels.min() < IGNORE_LABEL):
        raise ContractError("labels must lie in [0, 65535) or be the ignore sentinel")
    stored = np.where(labels == IGNORE_LABEL, _FILE_IGNORE, labels).astype("<u2")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, features.shape[0], features.shape[1])
    return header + features.astype("<f4").tobytes() + stored.tobytes()


def parse_feature_file(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError("feature file shorter than its header")
    magic, version, count, dim = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature file magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + count * dim * 4 + count * 2
    if len(data) != expected:
        raise FormatError(f"feature file is {len(data)} bytes, header implies {expected}")
    off = _FEATURE_HEADER.size
    features = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    raw = np.frombuffer(data, dtype="<u2", count=count, offset=off + count * dim * 4).astype(np.int64)
    if not np.isfinite(features).all():
        raise FormatError("feature file contains non-finite values")
    return features.astype(np.float32), np.where(raw == _FILE_IGNORE, IGNORE_LABEL, raw)


def save_stage(directory: str | Path, data: LabeledFeatureSet) -> None:
    """Write one ``.hfea`` file per scan."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("*.hfea"):
        old.unlink()
    for i in range(data.num_scans):
        s = data.scan(i)
        (directory / f"scan_{i:06d}.hfea").write_bytes(feature_file_bytes(s.features, s.labels))


def load_stage(
    directory: str | Path,
    feature_dim: int | None = None,
    class_remap: Mapping[int, int] | None = None,
) -> LabeledFeatureSet:
    """Load a stage directory of feature files or a KITTI sequence.

    KITTI scans are turned into features with ``extract_geometric_features``
    and need both ``feature_dim`` and ``class_remap``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"stage data directory not found: {directory}")
    files = sorted(directory.glob("*.hfea"))
    parts = []
    if files:
        for f in files:
            feats, labels = parse_feature_file(f.read_bytes())
            if len(labels):
                parts.append(LabeledFeatureSet(feats, labels))
    elif (directory / "velodyne").is_dir():
        if feature_dim is None or class_remap is None:
            raise ConfigError("KITTI stages need feature_dim and a class remap")
        for bin_path in sorted((directory / "velodyne").glob("*.bin")):
            label_path = directory / "labels" / (bin_path.stem + ".label")
            if not label_path.is_file():
                raise FileNotFoundError(f"missing label file: {label_path}")
            scan = parse_kitti_bin(bin_path.read_bytes())
            if len(scan) == 0:
                continue
            scan = parse_kitti_label(label_path.read_bytes(), scan, class_remap)
            parts.append(LabeledFeatureSet(extract_geometric_features(scan, feature_dim), scan.labels))
    else:
        raise FileNotFoundError(f"no .hfea files or velodyne/ directory in {directory}")
    if not parts:
        raise FormatError(f"stage directory {directory} contains no points")
    data = LabeledFeatureSet.concatenate(parts)
    if feature_dim is not None and data.feature_dim != feature_dim:
        raise FormatError(f"{directory}: feature_dim {data.feature_dim} != configured {feature_dim}")
    return data


# -- synthetic benchmark -----------------------------------------------------


@dataclass
class SyntheticDriftSpec:
    """Gaussian class clusters whose means move between pre- and post-deployment."""

    class_means: np.ndarray  # (C, p)
    drift_shift: np.ndarray  # (C, p)
    points_per_scan: int = 2000
    scans_per_stage: tuple[int, int, int] = (20, 20, 20)
    class_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.drift_shift = np.asarray(self.drift_shift, dtype=np.float64)
        if self.class_means.ndim != 2 or self.class_means.shape[0] < 1:
            raise ConfigError("class_means must be a non-empty (C, p) array")
        if self.drift_shift.shape != self.class_means.shape:
            raise ConfigError(f"drift_shift shape {self.drift_shift.shape} != class_means {self.class_means.shape}")
        if len(np.unique(self.class_means, axis=0)) != len(self.class_means):
            raise ConfigError("class means must be pairwise distinct")
        if self.points_per_scan < 1 or len(self.scans_per_stage) != 3 or min(self.scans_per_stage) < 1:
            raise ConfigError("points_per_scan and every scans_per_stage entry must be >= 1")
        if not self.class_scale >= 0:
            raise ConfigError(f"class_scale must be non-negative, got {self.class_scale}")

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]


def default_benchmark_spec(
    num_classes: int = 6,
    feature_dim: int = 16,
    points_per_scan: int = 2000,
    scans_per_stage: tuple[int, int, int] = (20, 20, 20),
    class_scale: float = 1.0,
    drift_magnitude: float = 2.0,
    seed: int = 0,
) -> SyntheticDriftSpec:
    """Class centres on a ring, lifted off the origin; drift rotates every class
    toward its neighbour by ``drift_magnitude``.

    The encoder only sees feature directions, so the ring sits at a fixed
    offset along a separate axis to keep all clusters far from the origin.
    """
    if num_classes < 1 or feature_dim < 3:
        raise ConfigError("the default benchmark needs num_classes >= 1 and feature_dim >= 3")
    radius, lift = 6.0, 8.0
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, feature_dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    means[:, 2] = lift
    tangent = np.zeros_like(means)
    tangent[:, 0] = -np.sin(angles)
    tangent[:, 1] = np.cos(angles)
    return SyntheticDriftSpec(
        class_means=means,
        drift_shift=drift_magnitude * tangent,
        points_per_scan=points_per_scan,
        scans_per_stage=tuple(scans_per_stage),
        class_scale=class_scale,
        seed=seed,
    )


def _draw_stage(rng: np.random.Generator, spec: SyntheticDriftSpec, scans: int, shifted: bool) -> LabeledFeatureSet:
    c, n = spec.num_classes, spec.points_per_scan
    centres = spec.class_means + (spec.drift_shift if shifted else 0.0)
    # balanced labels per scan, shuffled within the scan
    labels = np.concatenate([rng.permutation(np.arange(n) % c) for _ in range(scans)])
    noise = rng.standard_normal((scans * n, spec.feature_dim))
    features = centres[labels] + spec.class_scale * noise
    return LabeledFeatureSet(features.astype(np.float32), labels, n * np.arange(1, scans + 1))


def generate_synthetic(spec: SyntheticDriftSpec) -> tuple[LabeledFeatureSet, LabeledFeatureSet, LabeledFeatureSet]:
    """Draw (pretrain, adapt, test) stages from independent seeded substreams."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)]
    pre, post, test = spec.scans_per_stage
    return (
        _draw_stage(streams[0], spec, pre, shifted=False),
        _draw_stage(streams[1], spec, post, shifted=True),
        _draw_stage(streams[2], spec, test, shifted=True),
    )
