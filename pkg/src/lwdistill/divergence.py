"""Shannon entropy, KL and Jensen-Shannon divergence, and the supervised loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class DivergenceConfig:
    beta1: float = 0.5
    beta2: float = 0.5
    floor: float = 1e-12

    def __post_init__(self):
        if not (0.0 <= self.beta1 <= 1.0 and 0.0 <= self.beta2 <= 1.0):
            raise ValueError(f"beta weights must lie in [0, 1], got {self.beta1}, {self.beta2}")
        if abs(self.beta1 + self.beta2 - 1.0) > 1e-12:
            raise ValueError(f"beta1 + beta2 must equal 1, got {self.beta1 + self.beta2}")
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor}")


def _prob(x, name: str) -> np.ndarray:
    v = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name}: expected a probability vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name}: non-finite entries")
    if (v < 0).any() or abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name}: not a probability vector (sum={v.sum()!r})")
    return v


def _pair(p, q, op: str):
    p, q = _prob(p, op), _prob(q, op)
    if p.shape != q.shape:
        raise ValueError(f"{op}: length mismatch {p.shape[0]} vs {q.shape[0]}")
    return p, q


def entropy(p) -> float:
    p = _prob(p, "entropy")
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kld(p, q, floor: float = 1e-12) -> float:
    """KL(p || q) in nats; zero-probability terms of p contribute nothing."""
    p, q = _pair(p, q, "kld")
    nz = p > 0
    val = float((p[nz] * np.log(p[nz] / np.maximum(q[nz], floor))).sum())
    return max(val, 0.0)


def jsd(s, t, cfg: DivergenceConfig = DivergenceConfig()) -> float:
    """Weighted Jensen-Shannon divergence via KL terms against the mixture."""
    s, t = _pair(s, t, "jsd")
    m = cfg.beta1 * s + cfg.beta2 * t
    val = cfg.beta1 * kld(s, m, cfg.floor) + cfg.beta2 * kld(t, m, cfg.floor)
    return min(max(val, 0.0), LN2)


def jsd_entropy_form(s, t, cfg: DivergenceConfig = DivergenceConfig()) -> float:
    """Same quantity written as H(mixture) - beta1 H(s) - beta2 H(t)."""
    s, t = _pair(s, t, "jsd")
    m = cfg.beta1 * s + cfg.beta2 * t
    return entropy(m) - cfg.beta1 * entropy(s) - cfg.beta2 * entropy(t)


def jsd_tensor(s: Tensor, t, cfg: DivergenceConfig = DivergenceConfig()) -> Tensor:
    """Differentiable JSD of a recorded probability vector against a fixed one.

    The floor is added inside both logarithms so zero entries of ``s`` keep a
    finite derivative.  Identical inputs give exactly zero.
    """
    t = T.as_tensor(t)
    if s.shape != t.shape:
        raise ValueError(f"jsd: length mismatch {s.shape} vs {t.shape}")
    m = T.add(T.mul(s, cfg.beta1), T.mul(t, cfg.beta2))
    log_m = T.log(T.add(m, cfg.floor))
    ks = T.sum(T.mul(s, T.sub(T.log(T.add(s, cfg.floor)), log_m)))
    kt = T.sum(T.mul(t, T.sub(T.log(T.add(t, cfg.floor)), log_m)))
    return T.add(T.mul(ks, cfg.beta1), T.mul(kt, cfg.beta2))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be batch x classes, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels.astype(np.int64)] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits), onehot))
    return T.mul(picked, -1.0 / n)
