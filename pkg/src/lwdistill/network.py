"""Layer-stack models, crucial-layer detection and teacher/student pairing.

A model is a plain stack of dense, conv, average-pool and flatten layers.  A
layer is *crucial* when it changes the channel (conv) or feature (dense)
count.  Crucial layers of a student and a teacher are paired by equal output
shape, in order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LWDL1"
PARAM_KINDS = ("dense", "conv")
LAYER_KINDS = PARAM_KINDS + ("avgpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    relu: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS and (self.in_size < 1 or self.out_size < 1):
            raise ValueError(f"{self.kind} layer needs positive in/out sizes")
        if self.kind in ("conv", "avgpool") and self.kernel < 1:
            raise ValueError(f"{self.kind} layer needs a positive kernel")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def describe(self) -> str:
        """Compact text form used in config files, e.g. ``conv 3 8 k3 s1 p1 relu``."""
        if self.kind == "dense":
            parts = ["dense", str(self.in_size), str(self.out_size)]
        elif self.kind == "conv":
            parts = ["conv", str(self.in_size), str(self.out_size), f"k{self.kernel}", f"s{self.stride}", f"p{self.padding}"]
        elif self.kind == "avgpool":
            parts = ["avgpool", str(self.kernel)]
        else:
            parts = ["flatten"]
        if self.relu:
            parts.append("relu")
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        tok = text.split()
        if not tok:
            raise ValueError("empty layer description")
        kind, rest = tok[0], tok[1:]
        relu = "relu" in rest
        rest = [r for r in rest if r != "relu"]
        try:
            if kind == "dense":
                (a, b) = rest
                return cls("dense", int(a), int(b), relu=relu)
            if kind == "conv":
                a, b, *opts = rest
                kw = {"k": 3, "s": 1, "p": 0}
                for o in opts:
                    if o[:1] not in kw:
                        raise ValueError(o)
                    kw[o[0]] = int(o[1:])
                return cls("conv", int(a), int(b), kernel=kw["k"], stride=kw["s"], padding=kw["p"], relu=relu)
            if kind == "avgpool":
                (k,) = rest
                return cls("avgpool", kernel=int(k), relu=relu)
            if kind == "flatten" and not rest:
                return cls("flatten", relu=relu)
        except ValueError:
            pass
        raise ValueError(f"cannot parse layer description {text!r}")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer; raises on incompatible neighbours."""
        shapes = []
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.describe()})"
            prev = "the input" if i == 0 else f"layer {i - 1} ({self.layers[i - 1].describe()})"
            if layer.kind == "dense":
                if len(cur) != 1 or cur[0] != layer.in_size:
                    raise ValueError(f"{where} expects {layer.in_size} features but {prev} produces shape {cur}")
                cur = (layer.out_size,)
            elif layer.kind == "conv":
                if len(cur) != 3 or cur[0] != layer.in_size:
                    raise ValueError(f"{where} expects {layer.in_size} channels but {prev} produces shape {cur}")
                ho = (cur[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (cur[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ValueError(f"{where} kernel does not fit the shape {cur} produced by {prev}")
                cur = (layer.out_size, ho, wo)
            elif layer.kind == "avgpool":
                if len(cur) != 3 or cur[1] % layer.kernel or cur[2] % layer.kernel:
                    raise ValueError(f"{where} cannot pool the shape {cur} produced by {prev}")
                cur = (cur[0], cur[1] // layer.kernel, cur[2] // layer.kernel)
            else:
                cur = (int(np.prod(cur)),)
            shapes.append(cur)
        return shapes

    def crucial_indices(self) -> list[int]:
        out = []
        for i, layer in enumerate(self.layers):
            if layer.has_params and layer.in_size != layer.out_size:
                out.append(i)
        return out

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("model spec has no layers")
        shapes = self.output_shapes()
        if len(shapes[-1]) != 1:
            raise ValueError(f"final layer must produce a feature vector, got shape {shapes[-1]}")
        if not self.crucial_indices():
            raise ValueError("no crucial layers: no layer changes the channel/feature count")

    @property
    def num_classes(self) -> int:
        return self.output_shapes()[-1][0]

    def to_dict(self) -> dict:
        return {
            "layers": [l.describe() for l in self.layers],
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(tuple(LayerSpec.parse(s) for s in d["layers"]), tuple(d["input_shape"]), int(d["seed"]))


@dataclass
class LayerTrace:
    """Intermediate tensors of one parametric layer during a forward pass."""

    inputs: Tensor  # dense: N x in ; conv: patch columns N x (C*k*k) x P
    pre: Tensor  # pre-activation output
    post: Tensor  # post-activation output


class Model:
    def __init__(self, spec: ModelSpec, params: Mapping[str, Tensor]):
        self.spec = spec
        self.params: dict[str, Tensor] = dict(params)
        self.crucial_indices: list[int] = spec.crucial_indices()
        self.output_shapes = spec.output_shapes()

    def __repr__(self) -> str:
        return f"Model({len(self.spec.layers)} layers, crucial={self.crucial_indices})"

    @property
    def num_classes(self) -> int:
        return self.output_shapes[-1][0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layer_params(self, index: int) -> list[Tensor]:
        layer = self.spec.layers[index]
        if not layer.has_params:
            return []
        return [self.params[f"{index}.weight"], self.params[f"{index}.bias"]]

    def param_layer(self) -> dict[str, int]:
        return {name: int(name.split(".")[0]) for name in self.params}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})

    def sgd_step(self, grads: Mapping[str, np.ndarray], lr_for_layer) -> None:
        """In-place update ``p -= lr * g``; the only sanctioned parameter mutation."""
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            lr = lr_for_layer(int(name.split(".")[0]))
            p.data -= lr * np.asarray(g)

    def forward(self, x) -> Tensor:
        logits, _ = run_layers(self, x)
        return logits

    __call__ = forward


def build_model(spec: ModelSpec) -> Model:
    """Instantiate ``spec`` with He-uniform weights and zero biases."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params: dict[str, Tensor] = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            shape = (layer.out_size, layer.in_size)
            fan_in = layer.in_size
        elif layer.kind == "conv":
            shape = (layer.out_size, layer.in_size, layer.kernel, layer.kernel)
            fan_in = layer.in_size * layer.kernel * layer.kernel
        else:
            continue
        bound = np.sqrt(6.0 / fan_in)
        params[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[f"{i}.bias"] = Tensor(np.zeros(layer.out_size), requires_grad=True)
    return Model(spec, params)


def _check_batch(model: Model, x: Tensor) -> None:
    want = model.spec.input_shape
    if tuple(x.shape[1:]) != want:
        raise ValueError(f"model expects samples of shape {want}, got batch of shape {x.shape}")


def run_layers(model: Model, x, keep: Iterable[int] = ()) -> tuple[Tensor, dict[int, LayerTrace]]:
    """Forward pass; records traces for the parametric layers listed in ``keep``."""
    x = T.as_tensor(x)
    _check_batch(model, x)
    keep = set(keep)
    traces: dict[int, LayerTrace] = {}
    h = x
    for i, layer in enumerate(model.spec.layers):
        if layer.kind == "dense":
            w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
            inp = h
            pre = T.add(T.matmul(h, T.transpose(w)), b)
        elif layer.kind == "conv":
            w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
            n, c, hh, ww = h.shape
            k, s, p = layer.kernel, layer.stride, layer.padding
            inp = T.im2col(h, k, s, p)
            z = T.matmul(T.reshape(w, (layer.out_size, c * k * k)), inp)
            z = T.add(z, T.reshape(b, (1, layer.out_size, 1)))
            pre = T.reshape(z, (n,) + model.output_shapes[i])
        elif layer.kind == "avgpool":
            inp = None
            pre = T.avg_pool2d(h, layer.kernel)
        else:
            inp = None
            pre = T.flatten(h)
        h = T.relu(pre) if layer.relu else pre
        if i in keep:
            traces[i] = LayerTrace(inp, pre, h)
    return h, traces


def forward_with_taps(model: Model, batch, taps: Iterable[int] = ()) -> tuple[Tensor, dict[int, Tensor]]:
    """Logits plus the post-activation outputs of the requested crucial layers."""
    taps = list(taps)
    bad = [t for t in taps if t not in model.crucial_indices]
    if bad:
        raise ValueError(f"tap layers {bad} are not crucial (crucial: {model.crucial_indices})")
    logits, traces = run_layers(model, batch, keep=taps)
    return logits, {t: traces[t].post for t in taps}


@dataclass(frozen=True)
class LayerPairing:
    pairs: tuple[tuple[int, int], ...]

    @property
    def k(self) -> int:
        return len(self.pairs)

    @property
    def student_layers(self) -> list[int]:
        return [s for s, _ in self.pairs]

    @property
    def teacher_layers(self) -> list[int]:
        return [t for _, t in self.pairs]


def pair_crucial_layers(student: Model, teacher: Model, sample) -> LayerPairing:
    """Order-preserving match of crucial layers with identical output shapes.

    Each student crucial layer takes the first not-yet-used teacher crucial
    layer of the same shape that lies after the previously matched one.
    """
    shape = tuple(np.shape(getattr(sample, "data", sample)))
    for m, who in ((student, "student"), (teacher, "teacher")):
        want = m.spec.input_shape
        if shape != want and shape[1:] != want:
            raise ValueError(f"{who} expects samples of shape {want}, got {shape}")
    t_crucial = teacher.crucial_indices
    pairs = []
    start = 0
    for s in student.crucial_indices:
        s_shape = student.output_shapes[s]
        for pos in range(start, len(t_crucial)):
            t = t_crucial[pos]
            if teacher.output_shapes[t] == s_shape:
                pairs.append((s, t))
                start = pos + 1
                break
    if not pairs:
        raise ValueError("zero matches: no crucial layer shapes shared by student and teacher")
    return LayerPairing(tuple(pairs))


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(model: Model, path) -> None:
    header = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 9:
        raise ValueError(f"{path}: truncated header at byte {len(raw)}")
    (n,) = struct.unpack_from("<I", raw, 5)
    if len(raw) < 9 + n:
        raise ValueError(f"{path}: truncated spec at byte {len(raw)}")
    spec = ModelSpec.from_dict(json.loads(raw[9 : 9 + n].decode("utf-8")))
    template = build_model(spec)
    offset = 9 + n
    params = {}
    for name, p in template.params.items():
        nbytes = p.data.size * 8
        if len(raw) < offset + nbytes:
            raise ValueError(f"{path}: truncated parameter {name} at byte {offset}")
        arr = np.frombuffer(raw, dtype="<f8", count=p.data.size, offset=offset).reshape(p.shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes at byte {offset}")
    return Model(spec, params)
