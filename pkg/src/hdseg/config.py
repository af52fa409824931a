"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Precedence, lowest to
highest: built-in defaults, the config file, ``--set KEY=VALUE`` overrides.
Relative paths in the file resolve against the file's directory; relative
paths given as overrides resolve against the working directory. Unset data
paths default to ``<out>/data/{pretrain,adapt,test}``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from hdseg.buffer import BufferConfig
from hdseg.data import default_benchmark_spec
from hdseg.errors import ConfigError
from hdseg.hdc import DEFAULT_EPSILON
from hdseg.pipeline import StageConfig

PATH_KEYS = ("pretrain_data", "adapt_data", "test_data", "class_remap")
FULL_DATA = "full"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ratio(text: str) -> float | str:
    text = text.strip().lower()
    if text in (FULL_DATA, "full-data", "none"):
        return FULL_DATA
    return float(text)


def _parse_ratios(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    feature_dim: int = 16
    hd_dim: int = 10_000
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    num_classes: int = 6
    batch_size: int = 6
    retrain_epochs: int = 10
    buffer_ratio_percent: float | str = 5.0
    buffer_seed: int = 0
    buffer_scope: str = "epoch"
    cache_hypervectors: bool = False
    threads: int = dataclasses.field(default_factory=lambda: os.cpu_count() or 1)
    pretrain_data: Path | None = None
    adapt_data: Path | None = None
    test_data: Path | None = None
    class_remap: Path | None = None
    # synthetic benchmark
    points_per_scan: int = 2000
    scans_pretrain: int = 20
    scans_adapt: int = 20
    scans_test: int = 20
    class_scale: float = 1.0
    drift_magnitude: float = 2.0
    synth_seed: int = 0
    # buffer-ratio sweep
    bench_ratios: tuple[float, ...] = (5.0, 10.0, 20.0, 50.0, 100.0)

    def stage_config(self) -> StageConfig:
        buffer = None
        if self.buffer_ratio_percent != FULL_DATA:
            buffer = BufferConfig(float(self.buffer_ratio_percent), self.buffer_seed, self.buffer_scope)
        return StageConfig(
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            hd_dim=self.hd_dim,
            seed=self.seed,
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            retrain_epochs=self.retrain_epochs,
            buffer=buffer,
            cache_hypervectors=self.cache_hypervectors,
            threads=self.threads,
        )

    def synthetic_spec(self):
        return default_benchmark_spec(
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            points_per_scan=self.points_per_scan,
            scans_per_stage=(self.scans_pretrain, self.scans_adapt, self.scans_test),
            class_scale=self.class_scale,
            drift_magnitude=self.drift_magnitude,
            seed=self.synth_seed,
        )

    def stage_path(self, key: str, out_dir: Path) -> Path:
        value = getattr(self, key)
        if value is not None:
            return value
        return out_dir / "data" / key.removesuffix("_data")


_CONVERTERS = {
    "feature_dim": int,
    "hd_dim": int,
    "seed": int,
    "epsilon": float,
    "num_classes": int,
    "batch_size": int,
    "retrain_epochs": int,
    "buffer_ratio_percent": _parse_ratio,
    "buffer_seed": int,
    "buffer_scope": str.strip,
    "cache_hypervectors": _parse_bool,
    "threads": int,
    "points_per_scan": int,
    "scans_pretrain": int,
    "scans_adapt": int,
    "scans_test": int,
    "class_scale": float,
    "drift_magnitude": float,
    "synth_seed": int,
    "bench_ratios": _parse_ratios,
    **{k: Path for k in PATH_KEYS},
}


def _apply(cfg: RunConfig, key: str, raw: str, base_dir: Path | None, where: str) -> None:
    key = key.strip()
    if key not in _CONVERTERS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    try:
        value = _CONVERTERS[key](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    if key in PATH_KEYS and base_dir is not None and not value.is_absolute():
        value = base_dir / value
    setattr(cfg, key, value)


def parse_config_text(text: str, cfg: RunConfig | None = None, base_dir: Path | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        _apply(cfg, key, raw, base_dir, f"line {lineno}")
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parse_config_text(path.read_text(), cfg, base_dir=path.parent)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        _apply(cfg, key, raw, None, f"--set {item}")
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Serialize to the same key = value format (None paths are omitted)."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
