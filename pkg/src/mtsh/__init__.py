"""Multi-task stacked hourglass networks for 2D/3D pose, part segmentation and depth."""

from .vocab import (
    JOINTS,
    PARTS,
    CameraIntrinsics,
    Sample,
    TaskKind,
    TaskSet,
    all_task_sets,
    output_shape,
    parse_task_set,
)
from .codecs import DepthQuantizer, HeatmapParams, TargetBundle, encode_sample
from .network import HourglassConfig, MultiTaskModel, StackedHourglass, build_model
from .losses import LossReport, total_loss
from .metrics import MetricAccumulator, MetricsReport
from .trainer import TrainConfig, TrainState, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "JOINTS",
    "PARTS",
    "CameraIntrinsics",
    "DepthQuantizer",
    "HeatmapParams",
    "HourglassConfig",
    "LossReport",
    "MetricAccumulator",
    "MetricsReport",
    "MultiTaskModel",
    "Sample",
    "StackedHourglass",
    "TargetBundle",
    "TaskKind",
    "TaskSet",
    "TrainConfig",
    "TrainState",
    "all_task_sets",
    "build_model",
    "encode_sample",
    "evaluate",
    "load_checkpoint",
    "output_shape",
    "parse_task_set",
    "save_checkpoint",
    "total_loss",
    "train",
]
