"""Run configuration: an INI file with a fixed, typed schema.

Every key below is known to the parser; anything else is rejected so a
misspelt hyperparameter fails loudly instead of silently taking a default.

    [dataset]     name (spirals | blobs | image), seed, n_per_class,
                  num_classes, noise, turns, dim, separation, path
    [teacher]     layers (one per line), input_shape, seed, epochs, lr, batch_size
    [student]     layers, input_shape, seed
    [method]      kind (attention | jacobian | hessian), hessian_output
                  (probs | logits), beta1, beta2, floor
    [scheduler]   mode (none | multistep | layerwise), gamma, epsilon,
                  update_interval_epochs, milestones, factor, alpha_min,
                  alpha_max, eta0
    [training]    epochs, batch_size, base_lr, lambda, seed,
                  differentiable_maps (auto | true | false), hessian_refresh,
                  probe_size
    [output]      metrics, checkpoint_dir

The scheduler's base learning rate is ``training.base_lr``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .divergence import DivergenceConfig
from .maps import MapKind
from .network import LayerSpec, ModelSpec
from .scheduler import SchedulerConfig, SchedulerMode


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is ``section.key`` where applicable."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _lines(text: str) -> tuple[str, ...]:
    return tuple(line.strip() for line in text.strip().splitlines() if line.strip())


def _bool_or_auto(text: str) -> Optional[bool]:
    v = text.strip().lower()
    if v == "auto":
        return None
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"expected auto, true or false, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        v = text.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return v

    return parse


# section -> key -> (parser, default); a default of ... means required
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "dataset": {
        "name": (_choice("spirals", "blobs", "image"), ...),
        "seed": (int, 0),
        "n_per_class": (int, 100),
        "num_classes": (int, 3),
        "noise": (float, 0.0),
        "turns": (float, 1.0),
        "dim": (int, 2),
        "separation": (float, 3.0),
        "path": (str, ""),
    },
    "teacher": {
        "layers": (_lines, ...),
        "input_shape": (_ints, ...),
        "seed": (int, 0),
        "epochs": (int, 100),
        "lr": (float, 0.05),
        "batch_size": (int, 64),
    },
    "student": {
        "layers": (_lines, ...),
        "input_shape": (_ints, ...),
        "seed": (int, 0),
    },
    "method": {
        "kind": (_choice(*(k.value for k in MapKind)), ...),
        "hessian_output": (_choice("probs", "logits"), "probs"),
        "beta1": (float, 0.5),
        "beta2": (float, 0.5),
        "floor": (float, 1e-12),
    },
    "scheduler": {
        "mode": (_choice(*(m.value for m in SchedulerMode)), "none"),
        "gamma": (float, 0.9),
        "epsilon": (float, 1e-8),
        "update_interval_epochs": (int, 25),
        "milestones": (_ints, (25, 35)),
        "factor": (float, 0.01),
        "alpha_min": (float, 1e-5),
        "alpha_max": (float, 1.0),
        "eta0": (float, 0.0),
    },
    "training": {
        "epochs": (int, 50),
        "batch_size": (int, 64),
        "base_lr": (float, 0.1),
        "lambda": (float, 1.0),
        "seed": (int, 0),
        "differentiable_maps": (_bool_or_auto, None),
        "hessian_refresh": (int, 5),
        "probe_size": (int, 64),
    },
    "output": {
        "metrics": (str, "metrics.csv"),
        "checkpoint_dir": (str, "checkpoints"),
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    seed: int = 0
    n_per_class: int = 100
    num_classes: int = 3
    noise: float = 0.0
    turns: float = 1.0
    dim: int = 2
    separation: float = 3.0
    path: str = ""


@dataclass(frozen=True)
class TeacherTraining:
    epochs: int = 100
    lr: float = 0.05
    batch_size: int = 64


@dataclass(frozen=True)
class MethodConfig:
    kind: MapKind
    hessian_output: str = "probs"
    divergence: DivergenceConfig = DivergenceConfig()


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 0.1
    loss_weight: float = 1.0
    seed: int = 0
    differentiable_maps: Optional[bool] = None
    hessian_refresh: int = 5
    probe_size: int = 64


@dataclass(frozen=True)
class OutputConfig:
    metrics: str = "metrics.csv"
    checkpoint_dir: str = "checkpoints"


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    teacher: ModelSpec
    teacher_training: TeacherTraining
    student: ModelSpec
    method: MethodConfig
    scheduler: SchedulerConfig
    training: TrainingConfig
    output: OutputConfig

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with the student initialisation and training order reseeded."""
        student = ModelSpec(self.student.layers, self.student.input_shape, seed)
        return replace(self, student=student, training=replace(self.training, seed=seed))

    def with_mode(self, mode) -> "RunConfig":
        return replace(self, scheduler=replace(self.scheduler, mode=SchedulerMode(mode)))

    def with_kind(self, kind) -> "RunConfig":
        return replace(self, method=replace(self.method, kind=MapKind(kind)))


def _read_sections(text: str, source: str) -> dict[str, dict[str, Any]]:
    cp = configparser.ConfigParser(interpolation=None, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section)
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}")
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            name = f"{section}.{key}"
            if cp.has_option(section, key):
                try:
                    values[section][key] = parse(cp[section][key])
                except ValueError as exc:
                    raise ConfigError(str(exc), name) from exc
            elif default is ...:
                raise ConfigError("required key is missing", name)
            else:
                values[section][key] = default
    return values


def _model_spec(v: dict[str, Any], section: str) -> ModelSpec:
    layers = []
    for i, line in enumerate(v["layers"]):
        try:
            layers.append(LayerSpec.parse(line))
        except ValueError as exc:
            raise ConfigError(f"line {i + 1}: {exc}", f"{section}.layers") from exc
    try:
        spec = ModelSpec(tuple(layers), tuple(v["input_shape"]), v["seed"])
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc), f"{section}.layers") from exc
    return spec


def _build(section: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), section) from exc


def expected_sample_shape(ds: DatasetConfig) -> Optional[tuple[int, ...]]:
    if ds.name == "spirals":
        return (2,)
    if ds.name == "blobs":
        return (ds.dim,)
    return None


def validate(cfg: RunConfig) -> None:
    ds = cfg.dataset
    for key in ("n_per_class", "num_classes"):
        if getattr(ds, key) < 2:
            raise ConfigError("must be >= 2", f"dataset.{key}")
    if ds.name == "image" and not ds.path:
        raise ConfigError("image datasets need a path", "dataset.path")
    if ds.noise < 0:
        raise ConfigError("must be non-negative", "dataset.noise")
    if len(cfg.teacher.layers) < len(cfg.student.layers):
        raise ConfigError(
            f"teacher has {len(cfg.teacher.layers)} layers, fewer than the student's {len(cfg.student.layers)}",
            "teacher.layers",
        )
    shape = expected_sample_shape(ds)
    for name, spec in (("teacher", cfg.teacher), ("student", cfg.student)):
        if shape is not None and tuple(spec.input_shape) != shape:
            raise ConfigError(f"expected {shape} for dataset {ds.name}, got {spec.input_shape}", f"{name}.input_shape")
        if ds.name != "image" and spec.num_classes != ds.num_classes:
            raise ConfigError(f"network emits {spec.num_classes} logits for {ds.num_classes} classes", f"{name}.layers")
    t = cfg.training
    for key, value in (("epochs", t.epochs), ("batch_size", t.batch_size),
                       ("hessian_refresh", t.hessian_refresh), ("probe_size", t.probe_size)):
        if value < (0 if key == "epochs" else 1):
            raise ConfigError(f"out of range: {value}", f"training.{key}")
    if t.loss_weight < 0:
        raise ConfigError(f"must be non-negative, got {t.loss_weight}", "training.lambda")
    tt = cfg.teacher_training
    if tt.epochs < 0 or tt.batch_size < 1 or not tt.lr > 0:
        raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required", "teacher")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    v = _read_sections(text, source)
    sch, tr, m = v["scheduler"], v["training"], v["method"]
    cfg = RunConfig(
        dataset=DatasetConfig(**v["dataset"]),
        teacher=_model_spec(v["teacher"], "teacher"),
        teacher_training=TeacherTraining(v["teacher"]["epochs"], v["teacher"]["lr"], v["teacher"]["batch_size"]),
        student=_model_spec(v["student"], "student"),
        method=MethodConfig(
            MapKind(m["kind"]),
            m["hessian_output"],
            _build("method", DivergenceConfig, beta1=m["beta1"], beta2=m["beta2"], floor=m["floor"]),
        ),
        scheduler=_build(
            "scheduler",
            SchedulerConfig,
            mode=sch["mode"],
            base_lr=tr["base_lr"],
            gamma=sch["gamma"],
            epsilon=sch["epsilon"],
            update_interval_epochs=sch["update_interval_epochs"],
            multistep_milestones=sch["milestones"],
            multistep_factor=sch["factor"],
            alpha_min=sch["alpha_min"],
            alpha_max=sch["alpha_max"],
            eta0=sch["eta0"],
        ),
        training=TrainingConfig(
            tr["epochs"], tr["batch_size"], tr["base_lr"], tr["lambda"], tr["seed"],
            tr["differentiable_maps"], tr["hessian_refresh"], tr["probe_size"],
        ),
        output=OutputConfig(**v["output"]),
    )
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    return parse_config(text, str(p))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(getattr(value, "value", value))


def _layer_block(spec: ModelSpec) -> str:
    return "\n" + "\n".join(f"    {layer.describe()}" for layer in spec.layers)


def dump_config(cfg: RunConfig) -> str:
    s, t = cfg.scheduler, cfg.training
    sections = {
        "dataset": {f.name: getattr(cfg.dataset, f.name) for f in fields(cfg.dataset)},
        "teacher": {
            "layers": _layer_block(cfg.teacher),
            "input_shape": tuple(cfg.teacher.input_shape),
            "seed": cfg.teacher.seed,
            "epochs": cfg.teacher_training.epochs,
            "lr": cfg.teacher_training.lr,
            "batch_size": cfg.teacher_training.batch_size,
        },
        "student": {
            "layers": _layer_block(cfg.student),
            "input_shape": tuple(cfg.student.input_shape),
            "seed": cfg.student.seed,
        },
        "method": {
            "kind": cfg.method.kind,
            "hessian_output": cfg.method.hessian_output,
            "beta1": cfg.method.divergence.beta1,
            "beta2": cfg.method.divergence.beta2,
            "floor": cfg.method.divergence.floor,
        },
        "scheduler": {
            "mode": s.mode,
            "gamma": s.gamma,
            "epsilon": s.epsilon,
            "update_interval_epochs": s.update_interval_epochs,
            "milestones": s.multistep_milestones,
            "factor": s.multistep_factor,
            "alpha_min": s.alpha_min,
            "alpha_max": s.alpha_max,
            "eta0": s.eta0,
        },
        "training": {
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "base_lr": t.base_lr,
            "lambda": t.loss_weight,
            "seed": t.seed,
            "differentiable_maps": t.differentiable_maps,
            "hessian_refresh": t.hessian_refresh,
            "probe_size": t.probe_size,
        },
        "output": {"metrics": cfg.output.metrics, "checkpoint_dir": cfg.output.checkpoint_dir},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {v if k == 'layers' else _fmt(v)}" for k, v in items.items())
        out.append("")
    return "\n".join(out)
