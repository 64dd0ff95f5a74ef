"""Dense float64 tensors with tape-scoped reverse-mode differentiation.

Every primitive's backward rule is written in terms of other primitives, so a
backward pass run with ``create_graph=True`` is itself recorded on the tape and
can be differentiated again.  That is how second derivatives are obtained.

A tape is only active inside a ``with Tape():`` block.  Operations executed
outside any tape are plain numpy computations and are never recorded.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "UnsupportedSecondOrderError",
    "no_grad",
    "active_tape",
    "getitem",
    "as_tensor",
    "backward",
    "grad",
    "grad_of_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "exp",
    "log",
    "square",
    "absolute",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "flatten",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "log_softmax",
    "im2col",
    "col2im",
]

_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "lwdistill_active_tape", default=None
)


class NonFiniteError(ValueError):
    """Raised when an operation would produce or consume NaN/Inf values."""


class TapeError(RuntimeError):
    pass


class UnsupportedSecondOrderError(RuntimeError):
    """A primitive on the differentiated path has no differentiable backward."""

    def __init__(self, op: str):
        super().__init__(f"second-order differentiation unsupported for primitive '{op}'")
        self.op = op


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what}: non-finite values encountered")


class Tensor:
    """An n-dimensional float64 array that can be recorded on a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def square(self) -> "Tensor":
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward", "second_order", "index", "tape")

    def __init__(self, op, inputs, output, backward, second_order, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.second_order = second_order
        self.tape = tape
        self.index = -1


class Tape:
    """Ordered record of primitive operations for one forward computation.

    Use as a context manager.  ``gradient`` walks the record backwards, visiting
    each node at most once.  Without ``retain_graph`` the tape is released after
    the first gradient call and any later call is rejected.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.released = False
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        if self.released:
            raise TapeError("cannot record on a released tape")
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        if t._node is not None:
            return t._node.tape is self
        return t.requires_grad

    def _record(self, node: _Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def release(self) -> None:
        self.nodes = []
        self.released = True

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        retain_graph: bool = False,
        create_graph: bool = False,
    ) -> list[Tensor]:
        """Gradients of a scalar ``target`` w.r.t. each of ``sources``.

        Sources may be leaves or intermediate tensors recorded on this tape.
        Sources the target does not depend on receive zeros.
        """
        if self.released:
            raise TapeError(
                "tape already released by an earlier backward pass; use retain_graph=True"
            )
        if target.data.shape != ():
            raise ValueError(f"gradient target must be a scalar, got shape {target.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, Tensor] = {}
        if self.tracks(target):
            grads[id(target)] = Tensor._wrap(np.ones(()))
            end = target._node.index if target._node is not None else -1
            token = _ACTIVE.set(self if create_graph else None)
            try:
                for node in reversed(self.nodes[: end + 1]):
                    out_id = id(node.output)
                    g = grads.get(out_id) if out_id in keep else grads.pop(out_id, None)
                    if g is None:
                        continue
                    if create_graph and not node.second_order:
                        raise UnsupportedSecondOrderError(node.op)
                    in_grads = node.backward(g)
                    for inp, ig in zip(node.inputs, in_grads):
                        if ig is None or not self.tracks(inp):
                            continue
                        prev = grads.get(id(inp))
                        grads[id(inp)] = ig if prev is None else add(prev, ig)
            finally:
                _ACTIVE.reset(token)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(g if g is not None else Tensor._wrap(np.zeros(s.shape)))
        if not retain_graph:
            self.release()
        return out


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


@contextmanager
def no_grad():
    """Suspend recording on whichever tape is active."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def _apply(
    op: str,
    out: np.ndarray,
    inputs: tuple,
    backward: Callable[[Tensor], tuple],
    second_order: bool = True,
) -> Tensor:
    _check_finite(out, op)
    t = Tensor._wrap(out)
    tape = _ACTIVE.get()
    if tape is not None and any(tape.tracks(i) for i in inputs):
        t.requires_grad = True
        t._node = _Node(op, inputs, t, backward, second_order, tape)
        tape._record(t._node)
    return t


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch between {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _apply("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def bw(g):
        return sum_to(g, a.shape), sum_to(mul(g, -1.0), b.shape)

    return _apply("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def bw(g):
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    return _apply("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if (b.data == 0).any():
        raise NonFiniteError("div: division by zero")

    def bw(g):
        ga = div(g, b)
        gb = mul(mul(ga, -1.0), div(a, b))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _apply("div", a.data / b.data, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (mul(g, mul(a, 2.0)),)

    return _apply("square", a.data * a.data, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    holder: list[Tensor] = []

    def bw(g):
        return (mul(g, holder[0]),)

    out = _apply("exp", np.exp(a.data), (a,), bw)
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")

    def bw(g):
        return (div(g, a),)

    return _apply("log", np.log(a.data), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative mask is a constant, so relu'' == 0 everywhere
    mask = Tensor._wrap((a.data > 0).astype(np.float64))

    def bw(g):
        return (mul(g, mask),)

    return _apply("relu", a.data * mask.data, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor._wrap(np.sign(a.data))

    def bw(g):
        return (mul(g, sign),)

    return _apply("abs", np.abs(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# contractions and reductions


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch between {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def bw(g):
        return (
            sum_to(matmul(g, _swap_last(b)), a.shape),
            sum_to(matmul(_swap_last(a), g), b.shape),
        )

    return _apply("matmul", np.matmul(a.data, b.data), (a, b), bw)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _apply("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction.  First-order only: its backward is not differentiable."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out_k = np.max(a.data, axis=axes, keepdims=True)
    hit = (a.data == out_k).astype(np.float64)
    hit /= hit.sum(axis=axes, keepdims=True)
    kept = out_k.shape

    def bw(g):
        return (Tensor._wrap(np.broadcast_to(g.data.reshape(kept), a.shape) * hit),)

    out = out_k if keepdims else out_k.reshape([n for i, n in enumerate(a.shape) if i not in axes])
    return _apply("amax", out, (a,), bw, second_order=False)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(g):
        return (reshape(g, a.shape),)

    return _apply("reshape", out, (a,), bw)


def flatten(a) -> Tensor:
    """Collapse every axis after the leading batch axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (transpose(g, inv),)

    return _apply("transpose", np.transpose(a.data, axes), (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape("broadcast_to", a.shape, shape) != shape:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")

    def bw(g):
        return (sum_to(g, a.shape),)

    return _apply("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), bw)


def sum_to(a, shape) -> Tensor:
    """Adjoint of broadcasting: sum ``a`` down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = a.data.sum(axis=axes, keepdims=True)
    out = out.reshape(shape)

    def bw(g):
        return (broadcast_to(g, a.shape),)

    return _apply("sum_to", out, (a,), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (_scatter(g, index, a.shape),)

    return _apply("getitem", a.data[index].copy(), (a,), bw)


def _scatter(g, index, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape)
    out[index] = g.data

    def bw(gg):
        return (getitem(gg, index),)

    return _apply("scatter", out, (g,), bw)


# ---------------------------------------------------------------------------
# convolution helpers


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold ``N x C x H x W`` into ``N x (C*k*k) x (Ho*Wo)`` patch columns."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"im2col: expected N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"im2col: kernel {kernel} does not fit input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # N C Ho Wo k k
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, ho * wo)

    def bw(g):
        return (col2im(g, x.shape, kernel, stride, padding),)

    return _apply("im2col", np.ascontiguousarray(cols), (x,), bw)


def col2im(cols, shape, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`im2col`: fold patch columns back, summing overlaps."""
    cols = as_tensor(cols)
    n, c, h, w = shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    blocks = cols.data.reshape(n, c, kernel, kernel, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for ky in range(kernel):
        for kx in range(kernel):
            xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += blocks[
                :, :, ky, kx
            ]
    out = xp[:, :, padding : padding + h, padding : padding + w].copy()

    def bw(g):
        return (im2col(g, kernel, stride, padding),)

    return _apply("col2im", out, (cols,), bw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``N x C x H x W`` input with ``O x C x k x k`` weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: shape mismatch between {x.shape} and {weight.shape}")
    o, c, k, k2 = weight.shape
    if k != k2 or x.shape[1] != c:
        raise ValueError(f"conv2d: shape mismatch between {x.shape} and {weight.shape}")
    n, _, h, w = x.shape
    cols = im2col(x, k, stride, padding)
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, o, 1)))
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    return reshape(out, (n, o, ho, wo))


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"avg_pool2d: expected N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {kernel}")
    blocks = reshape(x, (n, c, h // kernel, kernel, w // kernel, kernel))
    return mean(blocks, axis=(3, 5))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    # shift by a constant: the result is shift-invariant so derivatives stay exact
    shift = Tensor._wrap(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor._wrap(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, shift)
    return sub(z, log(sum(exp(z), axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# differentiation entry points


def _owning_tape(t: Tensor) -> Tape:
    if t._node is None:
        raise TapeError("tensor was not produced on a tape")
    return t._node.tape


def backward(scalar: Tensor, retain_graph: bool = False) -> dict:
    """Gradient of ``scalar`` w.r.t. every requires-grad leaf it depends on.

    Returns a dict keyed by the leaf tensors themselves.
    """
    if scalar.data.shape != ():
        raise ValueError(f"backward: expected a scalar, got shape {scalar.shape}")
    tape = _owning_tape(scalar)
    if tape.released:
        raise TapeError("tape already released by an earlier backward pass; use retain_graph=True")
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes[: scalar._node.index + 1]:
        for inp in node.inputs:
            if inp._node is None and inp.requires_grad:
                leaves.setdefault(id(inp), inp)
    params = list(leaves.values())
    grads = tape.gradient(scalar, params, retain_graph=retain_graph)
    return dict(zip(params, grads))


def grad(
    scalar: Tensor,
    sources: Sequence[Tensor],
    retain_graph: bool = False,
    create_graph: bool = False,
) -> list[Tensor]:
    return _owning_tape(scalar).gradient(scalar, sources, retain_graph, create_graph)


def grad_of_grad(scalar: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Diagonal of the Hessian of ``scalar`` w.r.t. each tensor in ``params``.

    One Hessian-vector product per coordinate, each obtained by differentiating
    the recorded first backward pass.  The tape is retained throughout.
    """
    params = list(params)
    tape = _owning_tape(scalar)
    first = tape.gradient(scalar, params, retain_graph=True, create_graph=True)
    diags = []
    for p, g in zip(params, first):
        out = np.zeros(p.shape)
        if tape.tracks(g):
            for k in range(p.size):
                onehot = np.zeros(p.shape)
                onehot.flat[k] = 1.0
                with tape:
                    gk = sum(mul(g, Tensor._wrap(onehot)))
                (h,) = tape.gradient(gk, [p], retain_graph=True)
                out.flat[k] = h.data.flat[k]
        diags.append(out)
    return diags
