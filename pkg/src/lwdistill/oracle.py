"""Brute-force reference computations used to check the engine.

Nothing in here touches the tape: derivatives come from central differences of
plain function evaluations, and the scheduler replay re-derives the momentum
recurrence from scratch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .scheduler import LayerLRState, SchedulerConfig


@dataclass(frozen=True)
class FDConfig:
    step: float = 1e-4
    scheme: str = "central"

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"FDConfig.step must be positive, got {self.step}")
        if self.scheme != "central":
            raise ValueError(f"only central differences are supported, got {self.scheme!r}")


def _as_list(params) -> tuple[list[np.ndarray], bool]:
    if isinstance(params, np.ndarray):
        return [params], True
    if np.isscalar(params):
        return [np.array(params, dtype=np.float64)], True
    return [np.asarray(p, dtype=np.float64) for p in params], False


def _evaluator(f, single: bool):
    def call(arrays):
        val = float(f(arrays[0] if single else arrays))
        if not math.isfinite(val):
            raise ValueError("fd oracle: function returned a non-finite value at a probe point")
        return val

    return call


def fd_gradient(
    f: Callable, params, cfg: FDConfig = FDConfig()
) -> np.ndarray | list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is an array (``f`` receives an array) or a sequence of arrays
    (``f`` receives the list).  The step for coordinate k is
    ``cfg.step * max(1, |theta_k|)``.
    """
    arrays, single = _as_list(params)
    arrays = [a.astype(np.float64, copy=True) for a in arrays]
    call = _evaluator(f, single)
    call(arrays)
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            h = cfg.step * max(1.0, abs(orig))
            flat[k] = orig + h
            fp = call(arrays)
            flat[k] = orig - h
            fm = call(arrays)
            flat[k] = orig
            g.reshape(-1)[k] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out[0] if single else out


def fd_hessian_diag(
    f: Callable, params, cfg: FDConfig = FDConfig()
) -> np.ndarray | list[np.ndarray]:
    """Second central difference along each coordinate axis."""
    arrays, single = _as_list(params)
    arrays = [a.astype(np.float64, copy=True) for a in arrays]
    call = _evaluator(f, single)
    f0 = call(arrays)
    out = []
    for a in arrays:
        d = np.zeros_like(a)
        flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            h = cfg.step * max(1.0, abs(orig))
            flat[k] = orig + h
            fp = call(arrays)
            flat[k] = orig - h
            fm = call(arrays)
            flat[k] = orig
            d.reshape(-1)[k] = (fp - 2.0 * f0 + fm) / (h * h)
        out.append(d)
    return out[0] if single else out


def fd_gradient_of(grad_fn: Callable, params, cfg: FDConfig = FDConfig()):
    """Diagonal second derivatives as central differences of an analytic gradient.

    ``grad_fn`` maps the parameter list to a list of gradient arrays.  Entry k
    of the result is ``(g_k(theta + h e_k) - g_k(theta - h e_k)) / 2h``.
    """
    arrays, single = _as_list(params)
    arrays = [a.astype(np.float64, copy=True) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        d = np.zeros_like(a)
        flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            h = cfg.step * max(1.0, abs(orig))
            flat[k] = orig + h
            gp = np.asarray(grad_fn(arrays[0] if single else arrays)[i]).reshape(-1)[k]
            flat[k] = orig - h
            gm = np.asarray(grad_fn(arrays[0] if single else arrays)[i]).reshape(-1)[k]
            flat[k] = orig
            d.reshape(-1)[k] = (gp - gm) / (2.0 * h)
        out.append(d)
    return out[0] if single else out


def replay_scheduler(
    jsd_trace: Sequence[Mapping[int, float]],
    cfg: SchedulerConfig,
    alpha0: float | None = None,
    eta0: float | None = None,
) -> dict[int, LayerLRState]:
    """Iterate the momentum/learning-rate recurrence over a trace of update steps.

    Each trace entry holds the aggregated divergence per layer for one update.
    """
    if not jsd_trace:
        raise ValueError("replay_scheduler: empty trace")
    alpha_start = cfg.base_lr if alpha0 is None else alpha0
    eta_start = cfg.eta0 if eta0 is None else eta0
    alpha: dict[int, float] = {}
    eta: dict[int, float] = {}
    for step, entry in enumerate(jsd_trace):
        if not entry:
            raise ValueError(f"replay_scheduler: step {step} has no per-layer values")
        for layer in sorted(entry):
            a = alpha.get(layer, alpha_start)
            e = eta.get(layer, eta_start)
            e = cfg.gamma * e + (1.0 - cfg.gamma) * float(entry[layer])
            a = a / math.sqrt(e + cfg.epsilon)
            a = min(max(a, cfg.alpha_min), cfg.alpha_max)
            alpha[layer], eta[layer] = a, e
    return {j: LayerLRState(j, alpha[j], eta[j]) for j in sorted(alpha)}


def eta_closed_form(eta0: float, c: float, gamma: float, steps: int) -> float:
    g = gamma**steps
    return g * eta0 + (1.0 - g) * c


def nearest_centroid_accuracy(x_train, y_train, x_test, y_test) -> float:
    """Accuracy of assigning each test point to the closest training class mean."""
    classes = np.unique(y_train)
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in classes])
    d = ((x_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return float((pred == y_test).mean())
