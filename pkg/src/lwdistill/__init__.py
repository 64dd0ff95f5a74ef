"""Layer-wise learning-rate distillation on a small reverse-mode autodiff engine."""

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .data import Dataset, generate_blobs, generate_spirals, load_image_dataset, write_image_dataset
from .divergence import DivergenceConfig, cross_entropy, jsd, kld
from .engine import (
    DistillationRun,
    EpochResult,
    TrainingDiverged,
    composite_loss,
    run_distillation,
    train_teacher,
)
from .maps import LayerMap, MapError, MapKind, extract_pair_maps
from .metrics import MetricsRecord, read_metrics, write_metrics
from .network import (
    LayerPairing,
    LayerSpec,
    Model,
    ModelSpec,
    build_model,
    load_checkpoint,
    pair_crucial_layers,
    save_checkpoint,
)
from .scheduler import LRTable, LayerLRState, SchedulerConfig, SchedulerMode, scheduler_step
from .tensor import Tape, Tensor, no_grad

__all__ = [
    "ConfigError", "RunConfig", "dump_config", "load_config", "parse_config",
    "Dataset", "generate_blobs", "generate_spirals", "load_image_dataset", "write_image_dataset",
    "DivergenceConfig", "cross_entropy", "jsd", "kld",
    "DistillationRun", "EpochResult", "TrainingDiverged", "composite_loss", "run_distillation", "train_teacher",
    "LayerMap", "MapError", "MapKind", "extract_pair_maps",
    "MetricsRecord", "read_metrics", "write_metrics",
    "LayerPairing", "LayerSpec", "Model", "ModelSpec", "build_model", "load_checkpoint",
    "pair_crucial_layers", "save_checkpoint",
    "LRTable", "LayerLRState", "SchedulerConfig", "SchedulerMode", "scheduler_step",
    "Tape", "Tensor", "no_grad",
]
