"""Per-layer probability maps compared between teacher and student.

Three flavours exist for a crucial layer j:

* attention: squared batch-mean activations summed over channels, one entry
  per spatial position (or per feature for dense layers);
* jacobian: for each class c, the squared norm of the gradient of the
  batch-mean class output w.r.t. layer j's weights and bias;
* hessian: for each class c, the absolute mass of the diagonal second
  derivatives of the batch-mean class output w.r.t. the same parameters.
  The class output is the softmax probability by default; with relu layers
  the logits are piecewise linear in one layer's weights and their curvature
  vanishes, so ``output="logits"`` is kept for smooth or linear models.

Every raw map is L1-normalised; an all-zero raw map becomes uniform.  The
derivative flavours have one entry per class, so student and teacher maps
agree in length even when their layers have different parameter counts.

All derivative maps for a model come out of one replicated forward pass: the
batch is tiled once per class, and a single backward pass seeded with the
matching one-hot class per replica yields the per-class sensitivities of every
tapped layer at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .network import LayerPairing, Model, forward_with_taps, run_layers
from .tensor import Tensor


class MapKind(str, Enum):
    ATTENTION = "attention"
    JACOBIAN = "jacobian"
    HESSIAN = "hessian"


class MapError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerMap:
    layer_index: int
    kind: MapKind
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"layer map must be a non-empty vector, got shape {v.shape}")
        if (v < 0).any() or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"layer map for layer {self.layer_index} is not a probability vector")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", MapKind(self.kind))

    def __len__(self) -> int:
        return self.values.size


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if not np.isfinite(raw).all():
        raise ValueError("cannot normalise a map with non-finite entries")
    total = raw.sum()
    if total <= 0:
        return np.full(raw.size, 1.0 / raw.size)
    return raw / total


def normalize_tensor(raw: Tensor) -> Tensor:
    total = T.sum(raw)
    if total.data <= 0:
        return Tensor(np.full(raw.size, 1.0 / raw.size))
    return T.div(raw, total)


# ---------------------------------------------------------------------------
# attention


def attention_raw(activations: Tensor) -> Tensor:
    """Squared batch-mean activation summed over channels: ``N x C x H x W -> H*W``, ``N x F -> F``."""
    a = T.mean(T.as_tensor(activations), axis=0)
    sq = T.square(a)
    if sq.ndim == 3:
        sq = T.sum(sq, axis=0)
    return T.reshape(sq, (-1,))


def attention_map(activation, layer_index: int = -1) -> LayerMap:
    """Map of one activation of per-sample shape ``C x H x W`` or ``F``."""
    a = np.asarray(getattr(activation, "data", activation), dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("attention_map: non-finite activation")
    if a.ndim not in (1, 3):
        raise ValueError(f"attention_map: expected C x H x W or F activation, got {a.shape}")
    raw = (a * a).sum(axis=0) if a.ndim == 3 else a * a
    return LayerMap(layer_index, MapKind.ATTENTION, normalize(raw))


# ---------------------------------------------------------------------------
# derivative maps


@dataclass
class _Sensitivity:
    n: int  # batch size
    classes: int
    delta: Tensor  # C x n x O x P : d logit_c / d pre-activation, per replica c
    cols: Tensor  # C x n x Q x P : layer inputs (dense: P == 1)


def _tile(x: np.ndarray, copies: int) -> np.ndarray:
    return np.broadcast_to(x, (copies,) + x.shape).reshape((copies * x.shape[0],) + x.shape[1:])


def _sensitivities(model: Model, batch, layers: Sequence[int], create_graph: bool):
    """Replicated forward + one backward; returns per-layer sensitivities and replica logits."""
    x = np.asarray(getattr(batch, "data", batch), dtype=np.float64)
    n, c = x.shape[0], model.num_classes
    x_rep = _tile(x, c)
    seed = np.zeros((c * n, c))
    seed[np.arange(c * n), np.repeat(np.arange(c), n)] = 1.0

    def body(tape):
        logits, traces = run_layers(model, x_rep, keep=layers)
        target = T.sum(T.mul(logits, seed))
        deltas = tape.gradient(
            target,
            [traces[j].pre for j in layers],
            retain_graph=create_graph,
            create_graph=create_graph,
        )
        return logits, traces, deltas

    if create_graph:
        tape = T.active_tape()
        if tape is None:
            raise MapError("differentiable maps need an active tape")
        logits, traces, deltas = body(tape)
    else:
        with T.Tape() as tape:
            logits, traces, deltas = body(tape)

    out = {}
    for j, d in zip(layers, deltas):
        layer = model.spec.layers[j]
        if layer.kind == "dense":
            delta = T.reshape(d, (c, n, layer.out_size, 1))
            cols = T.reshape(traces[j].inputs, (c, n, layer.in_size, 1))
        elif layer.kind == "conv":
            o = layer.out_size
            delta = T.reshape(d, (c, n, o, -1))
            q, p = traces[j].inputs.shape[1:]
            cols = T.reshape(traces[j].inputs, (c, n, q, p))
        else:
            raise MapError(f"layer {j} ({layer.kind}) has no parameters")
        out[j] = _Sensitivity(n, c, delta, cols)
    return out, T.reshape(logits, (c, n, c))


def _jacobian_raw(sens: _Sensitivity) -> Tensor:
    c, n = sens.classes, sens.n
    o, p = sens.delta.shape[2:]
    q = sens.cols.shape[2]
    d = T.reshape(T.transpose(sens.delta, (0, 2, 1, 3)), (c, o, n * p))
    x = T.reshape(T.transpose(sens.cols, (0, 1, 3, 2)), (c, n * p, q))
    g_w = T.mul(T.matmul(d, x), 1.0 / n)  # C x O x Q
    g_b = T.mul(T.sum(sens.delta, axis=(1, 3)), 1.0 / n)  # C x O
    return T.add(T.sum(T.square(g_w), axis=(1, 2)), T.sum(T.square(g_b), axis=1))


def _curvature(v: Tensor, probs: Tensor) -> Tensor:
    """``v_i^T (d^2 p_c / d logits^2) v_i`` for every class c.

    ``v`` is ``C x n x K`` (class axis first) and ``probs`` is ``C x n``.  With
    ``s = p . v`` the quadratic form reduces to ``p_c ((v_c - s)^2 - (p . v^2 - s^2))``.
    """
    pk = T.reshape(probs, probs.shape + (1,))
    s = T.sum(T.mul(pk, v), axis=0)
    var = T.sub(T.sum(T.mul(pk, T.square(v)), axis=0), T.square(s))
    return T.mul(pk, T.sub(T.square(T.sub(v, s)), var))


def _hessian_raw(sens: _Sensitivity, probs: Tensor) -> Tensor:
    c, n = sens.classes, sens.n
    o, p = sens.delta.shape[2:]
    q = sens.cols.shape[2]
    bias_v = T.sum(sens.delta, axis=3)  # C x n x O
    h_b = T.mul(T.sum(_curvature(bias_v, probs), axis=1), 1.0 / n)  # C x O
    if p == 1:
        # dense: per-sample weight gradient is delta (outer) input, so the
        # quadratic form factorises into curvature(delta) * input^2
        h = T.reshape(T.getitem(sens.cols, 0), (n, q))
        qd = _curvature(T.reshape(sens.delta, (c, n, o)), probs)  # C x n x O
        h_w = T.mul(T.matmul(T.transpose(qd, (0, 2, 1)), T.square(h)), 1.0 / n)  # C x O x Q
    else:
        cols0 = T.transpose(T.getitem(sens.cols, 0), (0, 2, 1))  # n x P x Q
        g = T.matmul(sens.delta, cols0)  # C x n x O x Q per-sample weight gradients
        g = T.reshape(g, (c, n, o * q))
        h_w = T.mul(T.sum(_curvature(g, probs), axis=1), 1.0 / n)
    mass_w = T.sum(T.reshape(T.absolute(h_w), (c, -1)), axis=1)
    return T.add(mass_w, T.sum(T.absolute(h_b), axis=1))


def derivative_raw(
    model: Model,
    layers: Sequence[int],
    batch,
    kind: MapKind,
    create_graph: bool = False,
    output: str = "probs",
) -> dict[int, Tensor]:
    """Un-normalised Jacobian or Hessian maps for several layers of one model.

    ``output`` selects the differentiated class outputs for the Hessian flavour:
    softmax probabilities (``"probs"``) or raw logits (``"logits"``).  Logits of
    these piecewise-linear stacks have an identically zero Hessian w.r.t. any
    single layer, so that choice always yields uniform maps.
    """
    kind = MapKind(kind)
    layers = list(layers)
    if output not in ("probs", "logits"):
        raise ValueError(f"unknown hessian output {output!r}")
    sens, logits = _sensitivities(model, batch, layers, create_graph)
    if kind is MapKind.JACOBIAN:
        return {j: _jacobian_raw(sens[j]) for j in layers}
    if kind is MapKind.HESSIAN:
        c = model.num_classes
        if output == "logits":
            return {j: Tensor(np.zeros(c)) for j in layers}
        probs = T.transpose(T.softmax(T.getitem(logits, 0), axis=-1))  # C x n
        return {j: _hessian_raw(sens[j], probs) for j in layers}
    raise MapError(f"{kind.value} is not a derivative map")


def _checked_layer(model: Model, layer_index: int) -> None:
    if layer_index not in model.crucial_indices:
        raise ValueError(f"layer {layer_index} is not crucial (crucial: {model.crucial_indices})")


def jacobian_map(model: Model, layer_index: int, batch) -> LayerMap:
    _checked_layer(model, layer_index)
    raw = derivative_raw(model, [layer_index], batch, MapKind.JACOBIAN)[layer_index]
    return LayerMap(layer_index, MapKind.JACOBIAN, normalize(raw.data))


def hessian_map(
    model: Model, layer_index: int, batch, output: str = "probs", method: str = "gauss_newton"
) -> LayerMap:
    """Hessian-flavour map of one crucial layer.

    ``method="gauss_newton"`` uses the exact outer-product identity that holds
    because the logits are piecewise linear in a single layer's parameters.
    ``method="double_backward"`` differentiates a recorded backward pass once
    per parameter and class; slow, but independent of that identity.
    """
    _checked_layer(model, layer_index)
    if method == "gauss_newton":
        raw = derivative_raw(model, [layer_index], batch, MapKind.HESSIAN, output=output)[layer_index].data
    elif method == "double_backward":
        raw = _hessian_raw_double_backward(model, layer_index, batch, output)
    else:
        raise ValueError(f"unknown hessian method {method!r}")
    return LayerMap(layer_index, MapKind.HESSIAN, normalize(raw))


def _hessian_raw_double_backward(model: Model, layer_index: int, batch, output: str) -> np.ndarray:
    params = model.layer_params(layer_index)
    raw = np.zeros(model.num_classes)
    for c in range(model.num_classes):
        with T.Tape():
            logits = model.forward(batch)
            out = T.softmax(logits, axis=-1) if output == "probs" else logits
            f_c = T.mean(T.getitem(out, (slice(None), c)))
        diags = T.grad_of_grad(f_c, params)
        raw[c] = float(np.sum([np.abs(d).sum() for d in diags]))
    return raw


# ---------------------------------------------------------------------------
# batch-level extraction


def model_maps(
    model: Model,
    layers: Sequence[int],
    kind: MapKind,
    batch,
    output: str = "probs",
) -> dict[int, np.ndarray]:
    """Normalised, detached maps of ``kind`` for the given crucial layers."""
    kind = MapKind(kind)
    layers = list(layers)
    try:
        if kind is MapKind.ATTENTION:
            with T.no_grad():
                _, taps = forward_with_taps(model, batch, layers)
                return {j: normalize(attention_raw(taps[j]).data) for j in layers}
        raws = derivative_raw(model, layers, batch, kind, output=output)
        return {j: normalize(raws[j].data) for j in layers}
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        raise MapError(f"{kind.value} map extraction failed for layers {layers}: {exc}") from exc


def extract_pair_maps(
    student: Model,
    teacher: Model,
    pairing: LayerPairing,
    kind: MapKind,
    batch,
    output: str = "probs",
) -> list[tuple[LayerMap, LayerMap]]:
    kind = MapKind(kind)
    if pairing.k < 1:
        raise ValueError("pairing has no layer pairs")
    s_maps = model_maps(student, pairing.student_layers, kind, batch, output)
    t_maps = model_maps(teacher, pairing.teacher_layers, kind, batch, output)
    out = []
    for s, t in pairing.pairs:
        if s_maps[s].shape != t_maps[t].shape:
            raise MapError(
                f"pair ({s}, {t}): student map length {s_maps[s].size} != teacher map length {t_maps[t].size}"
            )
        out.append((LayerMap(s, kind, s_maps[s]), LayerMap(t, kind, t_maps[t])))
    return out
