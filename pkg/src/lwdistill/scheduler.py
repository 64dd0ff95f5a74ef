"""Per-layer learning rates driven by teacher/student map divergence.

Three modes are available.  ``none`` keeps every group at the base rate,
``multistep`` decays all groups by a fixed factor at fixed epochs, and
``layerwise`` gives every matched student layer its own rate that is revised
every ``update_interval_epochs`` from the window-averaged divergence:

    eta'   = gamma * eta + (1 - gamma) * jsd
    alpha' = clamp(alpha / sqrt(eta' + epsilon), alpha_min, alpha_max)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence


class SchedulerMode(str, Enum):
    NONE = "none"
    MULTISTEP = "multistep"
    LAYERWISE = "layerwise"


@dataclass(frozen=True)
class SchedulerConfig:
    mode: SchedulerMode = SchedulerMode.NONE
    base_lr: float = 0.1
    gamma: float = 0.9
    epsilon: float = 1e-8
    update_interval_epochs: int = 25
    multistep_milestones: tuple[int, ...] = (25, 35)
    multistep_factor: float = 0.01
    alpha_min: float = 1e-5
    alpha_max: float = 1.0
    eta0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", SchedulerMode(self.mode))
        object.__setattr__(self, "multistep_milestones", tuple(int(m) for m in self.multistep_milestones))
        self.validate()

    def validate(self) -> None:
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.update_interval_epochs < 1:
            raise ValueError(
                f"update_interval_epochs must be a positive integer, got {self.update_interval_epochs}"
            )
        if not self.multistep_factor > 0:
            raise ValueError(f"multistep_factor must be positive, got {self.multistep_factor}")
        if not (0 < self.alpha_min <= self.base_lr <= self.alpha_max and self.alpha_min < self.alpha_max):
            raise ValueError(
                "need 0 < alpha_min <= base_lr <= alpha_max with alpha_min < alpha_max, got "
                f"{self.alpha_min}, {self.base_lr}, {self.alpha_max}"
            )
        if self.eta0 < 0:
            raise ValueError(f"eta0 must be non-negative, got {self.eta0}")


@dataclass(frozen=True)
class LayerLRState:
    layer_index: int
    alpha: float
    eta: float = 0.0


@dataclass(frozen=True)
class LRTable:
    """Effective learning rate per parameter group for the next epoch."""

    base: float
    layers: Mapping[int, float] = field(default_factory=dict)

    def lr_for(self, layer_index: int) -> float:
        return self.layers.get(layer_index, self.base)


def init_states(layer_indices: Iterable[int], cfg: SchedulerConfig) -> dict[int, LayerLRState]:
    return {j: LayerLRState(j, cfg.base_lr, cfg.eta0) for j in layer_indices}


def update_layer_lr(state: LayerLRState, jsd_value: float, cfg: SchedulerConfig) -> LayerLRState:
    jsd_value = float(jsd_value)
    if not math.isfinite(jsd_value):
        raise ValueError(f"jsd value for layer {state.layer_index} is not finite")
    if jsd_value < 0:
        raise ValueError(f"jsd value for layer {state.layer_index} is negative: {jsd_value}")
    eta = cfg.gamma * state.eta + (1.0 - cfg.gamma) * jsd_value
    alpha = state.alpha / math.sqrt(eta + cfg.epsilon)
    alpha = min(max(alpha, cfg.alpha_min), cfg.alpha_max)
    return replace(state, alpha=alpha, eta=eta)


def multistep_lr(epoch: int, cfg: SchedulerConfig) -> float:
    passed = sum(1 for m in cfg.multistep_milestones if m <= epoch)
    return cfg.base_lr * cfg.multistep_factor**passed


def scheduler_step(
    states: Mapping[int, LayerLRState],
    epoch: int,
    epoch_jsd: Mapping[int, float] | None,
    cfg: SchedulerConfig,
) -> tuple[dict[int, LayerLRState], LRTable]:
    """Advance the schedule after ``epoch`` finished; returns the rates for the next epoch."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    states = dict(states)
    if cfg.mode is SchedulerMode.NONE:
        return states, LRTable(cfg.base_lr, {j: cfg.base_lr for j in states})
    if cfg.mode is SchedulerMode.MULTISTEP:
        lr = multistep_lr(epoch, cfg)
        return states, LRTable(lr, {j: lr for j in states})

    if epoch % cfg.update_interval_epochs == 0:
        epoch_jsd = epoch_jsd or {}
        missing = [j for j in states if j not in epoch_jsd]
        if missing:
            raise ValueError(f"epoch {epoch}: no divergence supplied for crucial layers {missing}")
        states = {j: update_layer_lr(s, epoch_jsd[j], cfg) for j, s in states.items()}
    return states, LRTable(cfg.base_lr, {j: s.alpha for j, s in states.items()})


def current_table(states: Mapping[int, LayerLRState], cfg: SchedulerConfig) -> LRTable:
    """Rates in effect before the first scheduler step."""
    return LRTable(cfg.base_lr, {j: (s.alpha if cfg.mode is SchedulerMode.LAYERWISE else cfg.base_lr) for j, s in states.items()})


def aggregate_epoch_jsd(per_batch_jsd: Sequence[Mapping[int, float]]) -> dict[int, float]:
    """Per-layer arithmetic mean over the supplied batches."""
    if not per_batch_jsd:
        raise ValueError("aggregate_epoch_jsd: no batches supplied")
    keys = set(per_batch_jsd[0])
    for i, entry in enumerate(per_batch_jsd):
        if set(entry) != keys:
            raise ValueError(f"aggregate_epoch_jsd: batch {i} has layers {sorted(entry)}, expected {sorted(keys)}")
    n = len(per_batch_jsd)
    return {j: math.fsum(float(b[j]) for b in per_batch_jsd) / n for j in sorted(keys)}
