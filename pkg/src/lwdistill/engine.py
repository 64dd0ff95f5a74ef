"""Teacher training and layer-wise distillation of a student network."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .divergence import DivergenceConfig, cross_entropy, jsd, jsd_tensor
from .maps import (
    MapKind,
    attention_raw,
    derivative_raw,
    extract_pair_maps,
    model_maps,
    normalize_tensor,
)
from .network import LayerPairing, Model, build_model, forward_with_taps, save_checkpoint
from .scheduler import (
    SchedulerConfig,
    SchedulerMode,
    aggregate_epoch_jsd,
    current_table,
    init_states,
    scheduler_step,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_CHUNK = 2048


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


def default_differentiable(kind: MapKind) -> bool:
    """Attention and Jacobian maps are back-propagated through; Hessian maps are not."""
    return MapKind(kind) is not MapKind.HESSIAN


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def minibatches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` on ``(x, y)``."""
    total, correct = 0.0, 0
    with T.no_grad():
        for start in range(0, len(y), EVAL_CHUNK):
            xb, yb = x[start : start + EVAL_CHUNK], y[start : start + EVAL_CHUNK]
            logits = model.forward(xb)
            total += cross_entropy(logits, yb).item() * len(yb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return total / len(y), correct / len(y)


def _named_grads(model: Model, grads: Sequence[Tensor]) -> dict[str, np.ndarray]:
    return {name: g.data for name, g in zip(model.params, grads)}


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float


def train_model(
    model: Model,
    data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> list[EpochStats]:
    """Plain minibatch SGD on cross-entropy; updates ``model`` in place."""
    x_train, y_train = data.train()
    x_test, y_test = data.test()
    history = []
    for epoch in range(1, epochs + 1):
        losses = []
        try:
            for idx in minibatches(epoch_order(seed, epoch, len(y_train)), batch_size):
                with T.Tape() as tape:
                    loss = cross_entropy(model.forward(x_train[idx]), y_train[idx])
                grads = tape.gradient(loss, model.parameters())
                model.sgd_step(_named_grads(model, grads), lambda _j: lr)
                losses.append(loss.item())
            tr_loss, tr_acc = evaluate(model, x_train, y_train)
            te_loss, te_acc = evaluate(model, x_test, y_test)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", epoch) from exc
        history.append(EpochStats(epoch, float(np.mean(losses)), tr_acc, te_loss, te_acc))
    return history


def train_teacher(
    spec,
    data: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    checkpoint: Optional[str] = None,
) -> Model:
    teacher = build_model(spec)
    history = train_model(teacher, data, epochs, lr, batch_size, seed)
    if history:
        log.info("teacher: final test accuracy %.4f after %d epochs", history[-1].test_accuracy, epochs)
    if checkpoint is not None:
        save_checkpoint(teacher, checkpoint)
    return teacher


# ---------------------------------------------------------------------------
# composite objective


class MapCache:
    """Holds detached maps between refreshes (the Hessian cost guard)."""

    def __init__(self, refresh: int):
        if refresh < 1:
            raise ValueError(f"hessian_refresh must be >= 1, got {refresh}")
        self.refresh = refresh
        self.calls = 0
        self.student: Optional[dict] = None
        self.teacher: Optional[dict] = None

    def stale(self) -> bool:
        due = self.student is None or self.calls % self.refresh == 0
        self.calls += 1
        return due


def composite_loss(
    student: Model,
    teacher: Model,
    pairing: LayerPairing,
    map_kind: MapKind,
    batch,
    labels,
    loss_weight: float,
    divergence: DivergenceConfig = DivergenceConfig(),
    differentiable: Optional[bool] = None,
    hessian_output: str = "probs",
    cache: Optional[MapCache] = None,
) -> tuple[Tensor, dict[int, float]]:
    """Cross-entropy plus ``loss_weight`` times the summed per-pair map JSD.

    Records on the active tape, if any.  Teacher maps are always constants, so
    gradients reach only student parameters.  Returns the total and the
    per-pair losses keyed by student layer index.
    """
    kind = MapKind(map_kind)
    if loss_weight < 0:
        raise ValueError(f"loss weight must be >= 0, got {loss_weight}")
    diff = default_differentiable(kind) if differentiable is None else bool(differentiable)
    # without a recording tape nobody can differentiate the maps, and the
    # detached maps have the same values
    diff = diff and loss_weight > 0 and T.active_tape() is not None
    x = np.asarray(getattr(batch, "data", batch), dtype=np.float64)
    s_layers, t_layers = pairing.student_layers, pairing.teacher_layers

    s_maps = None
    if diff and kind is MapKind.ATTENTION:
        logits, taps = forward_with_taps(student, x, s_layers)
        s_maps = {j: normalize_tensor(attention_raw(taps[j])) for j in s_layers}
    else:
        logits = student.forward(x)
    ce = cross_entropy(logits, labels)

    if cache is not None and not diff and not cache.stale():
        s_const, t_maps = cache.student, cache.teacher
    else:
        t_maps = model_maps(teacher, t_layers, kind, x, hessian_output)
        s_const = None if diff else model_maps(student, s_layers, kind, x, hessian_output)
        if cache is not None and not diff:
            cache.student, cache.teacher = s_const, t_maps
    if s_maps is None:
        if diff:
            raws = derivative_raw(student, s_layers, x, kind, create_graph=True, output=hessian_output)
            s_maps = {j: normalize_tensor(raws[j]) for j in s_layers}
        else:
            s_maps = {j: Tensor(s_const[j]) for j in s_layers}

    losses = {s: jsd_tensor(s_maps[s], t_maps[t], divergence) for s, t in pairing.pairs}
    per_layer = {s: float(v.data) for s, v in losses.items()}
    if loss_weight == 0:
        return ce, per_layer
    layer_sum = losses[s_layers[0]]
    for s in s_layers[1:]:
        layer_sum = T.add(layer_sum, losses[s])
    return T.add(ce, T.mul(layer_sum, loss_weight)), per_layer


# ---------------------------------------------------------------------------
# distillation loop


@dataclass
class DistillationRun:
    student: Model
    teacher: Model
    pairing: LayerPairing
    map_kind: MapKind
    scheduler: SchedulerConfig
    epochs: int
    batch_size: int = 64
    loss_weight: float = 1.0
    seed: int = 0
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    differentiable_maps: Optional[bool] = None
    hessian_refresh: int = 5
    hessian_output: str = "probs"
    probe_size: int = 64

    def __post_init__(self):
        self.map_kind = MapKind(self.map_kind)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")
        missing = [j for j in self.pairing.student_layers if j not in self.student.crucial_indices]
        if missing:
            raise ValueError(f"pairing refers to non-crucial student layers {missing}")
        self.states = init_states(self.pairing.student_layers, self.scheduler)


@dataclass(frozen=True)
class EpochResult:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    per_layer_jsd: Mapping[int, float]
    per_layer_alpha: Mapping[int, float]
    per_layer_loss: Mapping[int, float]


def probe_indices(data: Dataset, seed: int, size: int) -> np.ndarray:
    test = data.test_idx
    take = min(size, len(test))
    return np.sort(np.random.default_rng([seed, 0x9E37]).choice(test, size=take, replace=False))


def probe_jsd(run: DistillationRun, probe_x: np.ndarray) -> dict[int, float]:
    pairs = extract_pair_maps(run.student, run.teacher, run.pairing, run.map_kind, probe_x, run.hessian_output)
    return {s.layer_index: jsd(s, t, run.divergence) for s, t in pairs}


def run_distillation(
    run: DistillationRun,
    data: Dataset,
    on_epoch: Optional[Callable[[EpochResult], None]] = None,
) -> list[EpochResult]:
    student, teacher, cfg = run.student, run.teacher, run.scheduler
    before = teacher.checksum()
    x_train, y_train = data.train()
    x_test, y_test = data.test()
    probe_x = data.inputs[probe_indices(data, run.seed, run.probe_size)]
    table = current_table(run.states, cfg)
    cache = MapCache(run.hessian_refresh) if run.map_kind is MapKind.HESSIAN else None
    window: list[dict[int, float]] = []
    last_jsd: dict[int, float] = {}
    results: list[EpochResult] = []

    for epoch in range(1, run.epochs + 1):
        totals, layer_sums = [], {s: 0.0 for s in run.pairing.student_layers}
        try:
            for idx in minibatches(epoch_order(run.seed, epoch, len(y_train)), run.batch_size):
                with T.Tape() as tape:
                    total, per_layer = composite_loss(
                        student, teacher, run.pairing, run.map_kind,
                        x_train[idx], y_train[idx], run.loss_weight,
                        run.divergence, run.differentiable_maps, run.hessian_output, cache,
                    )
                grads = tape.gradient(total, student.parameters())
                student.sgd_step(_named_grads(student, grads), table.lr_for)
                totals.append(total.item())
                for s, v in per_layer.items():
                    layer_sums[s] += v
            tr_loss, tr_acc = evaluate(student, x_train, y_train)
            te_loss, te_acc = evaluate(student, x_test, y_test)
            last_jsd = probe_jsd(run, probe_x)
        except T.NonFiniteError as exc:
            alphas = {j: table.lr_for(j) for j in run.pairing.student_layers}
            raise TrainingDiverged(
                f"distillation diverged at epoch {epoch}: {exc}; layer alphas {alphas}; last probe jsd {last_jsd}",
                epoch,
            ) from exc

        window.append(last_jsd)
        update = cfg.mode is SchedulerMode.LAYERWISE and epoch % cfg.update_interval_epochs == 0
        run.states, table = scheduler_step(run.states, epoch, aggregate_epoch_jsd(window) if update else None, cfg)
        if update:
            window = []
        result = EpochResult(
            epoch=epoch,
            train_loss=float(np.mean(totals)),
            train_accuracy=tr_acc,
            test_loss=te_loss,
            test_accuracy=te_acc,
            per_layer_jsd=dict(last_jsd),
            per_layer_alpha={j: table.lr_for(j) for j in run.pairing.student_layers},
            per_layer_loss={s: v / len(totals) for s, v in layer_sums.items()},
        )
        results.append(result)
        if on_epoch is not None:
            on_epoch(result)

    if teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return results
