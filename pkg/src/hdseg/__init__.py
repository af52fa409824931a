"""Hyperdimensional-computing point-cloud segmentation with buffered post-deployment adaptation."""

from hdseg.buffer import BufferConfig, BufferSelection, LossStore, init_losses, record_losses, select
from hdseg.data import (
    LabeledFeatureSet,
    PointCloudScan,
    SyntheticDriftSpec,
    default_benchmark_spec,
    generate_synthetic,
    load_stage,
    save_stage,
)
from hdseg.hdc import ClassModel, Encoder, Prediction, build_encoder, encode, encode_batch
from hdseg.metrics import ConfusionMatrix, iou, measure_fps
from hdseg.pipeline import AdaptationReport, EpochRecord, StageConfig, adapt, evaluate, pretrain

__version__ = "0.1.0"
