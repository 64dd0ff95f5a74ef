"""Glue between a RunConfig and the engine: datasets, teacher cache, runs, sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .config import RunConfig
from .data import Dataset, generate_blobs, generate_spirals, load_image_dataset
from .engine import DistillationRun, EpochResult, run_distillation, train_teacher
from .maps import MapKind
from .metrics import MetricsRecord
from .network import Model, build_model, load_checkpoint, pair_crucial_layers, save_checkpoint
from .scheduler import SchedulerMode

log = logging.getLogger(__name__)


def make_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    if ds.name == "spirals":
        return generate_spirals(ds.n_per_class, ds.num_classes, ds.noise, ds.seed, ds.turns)
    if ds.name == "blobs":
        return generate_blobs(ds.n_per_class, ds.num_classes, ds.dim, ds.separation, ds.seed)
    return load_image_dataset(ds.path, ds.seed)


def teacher_fingerprint(cfg: RunConfig) -> str:
    """Hash of everything the trained teacher depends on."""
    blob = json.dumps(
        {"dataset": asdict(cfg.dataset), "spec": cfg.teacher.to_dict(), "training": asdict(cfg.teacher_training)},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def teacher_path(cfg: RunConfig) -> Path:
    return Path(cfg.output.checkpoint_dir) / f"teacher_{teacher_fingerprint(cfg)}.lwdl"


def fit_teacher(cfg: RunConfig, data: Dataset, save: bool = True) -> Model:
    tt = cfg.teacher_training
    path = teacher_path(cfg) if save else None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
    return train_teacher(cfg.teacher, data, tt.epochs, tt.lr, cfg.teacher.seed, tt.batch_size, path)


def obtain_teacher(cfg: RunConfig, data: Dataset, use_cache: bool = True) -> Model:
    """Load the cached teacher for this config, training (and caching) it if absent."""
    path = teacher_path(cfg)
    if use_cache and path.exists():
        return load_checkpoint(path)
    return fit_teacher(cfg, data, save=use_cache)


def build_run(cfg: RunConfig, teacher: Model, data: Dataset) -> DistillationRun:
    student = build_model(cfg.student)
    pairing = pair_crucial_layers(student, teacher, data.inputs[:1])
    t = cfg.training
    return DistillationRun(
        student=student,
        teacher=teacher,
        pairing=pairing,
        map_kind=cfg.method.kind,
        scheduler=cfg.scheduler,
        epochs=t.epochs,
        batch_size=t.batch_size,
        loss_weight=t.loss_weight,
        seed=t.seed,
        divergence=cfg.method.divergence,
        differentiable_maps=t.differentiable_maps,
        hessian_refresh=t.hessian_refresh,
        hessian_output=cfg.method.hessian_output,
        probe_size=t.probe_size,
    )


def distill(cfg: RunConfig, teacher: Model, data: Dataset) -> tuple[DistillationRun, list[EpochResult]]:
    run = build_run(cfg, teacher, data)
    return run, run_distillation(run, data)


def to_records(results: Sequence[EpochResult]) -> list[MetricsRecord]:
    """Two rows per epoch: the training pass and the held-out evaluation."""
    out = []
    for r in results:
        layers = sorted(r.per_layer_alpha)
        jsd = tuple(r.per_layer_jsd[j] for j in layers)
        alpha = tuple(r.per_layer_alpha[j] for j in layers)
        out.append(MetricsRecord(r.epoch, "train", r.train_loss, r.train_accuracy, jsd, alpha))
        out.append(MetricsRecord(r.epoch, "test", r.test_loss, r.test_accuracy, jsd, alpha))
    return out


@dataclass(frozen=True)
class SweepRow:
    method: str
    scheduler: str
    accuracies: tuple[float, ...]

    @property
    def mean(self) -> float:
        return math.fsum(self.accuracies) / len(self.accuracies)

    @property
    def std(self) -> float:
        n = len(self.accuracies)
        if n < 2:
            return 0.0
        m = self.mean
        return math.sqrt(math.fsum((a - m) ** 2 for a in self.accuracies) / (n - 1))


def sweep(
    cfg: RunConfig,
    seeds: Sequence[int],
    kinds: Optional[Iterable] = None,
    modes: Optional[Iterable] = None,
    teacher: Optional[Model] = None,
    data: Optional[Dataset] = None,
) -> list[SweepRow]:
    """Final test accuracy for every method x scheduler pair over ``seeds``."""
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    kinds = [MapKind(k) for k in (kinds if kinds is not None else MapKind)]
    modes = [SchedulerMode(m) for m in (modes if modes is not None else SchedulerMode)]
    data = data if data is not None else make_dataset(cfg)
    teacher = teacher if teacher is not None else obtain_teacher(cfg, data)
    rows = []
    for kind in kinds:
        for mode in modes:
            accs = []
            for seed in seeds:
                _, results = distill(cfg.with_kind(kind).with_mode(mode).with_seed(seed), teacher, data)
                accs.append(results[-1].test_accuracy if results else float("nan"))
                log.info("sweep %s/%s seed %d: %.4f", kind.value, mode.value, seed, accs[-1])
            rows.append(SweepRow(kind.value, mode.value, tuple(accs)))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    n = max(len(r.accuracies) for r in rows)
    lines = ["method,scheduler,n,mean,std," + ",".join(f"acc_{i}" for i in range(n))]
    for r in rows:
        accs = ",".join(repr(a) for a in r.accuracies)
        lines.append(f"{r.method},{r.scheduler},{len(r.accuracies)},{r.mean!r},{r.std!r},{accs}")
    return "\n".join(lines) + "\n"
