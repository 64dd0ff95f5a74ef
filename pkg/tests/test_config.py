import pytest
from hypothesis import given
from hypothesis import strategies as st

from lwdistill.config import ConfigError, dump_config, load_config, parse_config
from lwdistill.maps import MapKind
from lwdistill.resources import REFERENCE_CONFIGS, reference_config
from lwdistill.scheduler import SchedulerMode

MINIMAL = """
[dataset]
name = spirals
num_classes = 3

[teacher]
layers =
    dense 2 8 relu
    dense 8 3 relu
    dense 3 3
input_shape = 2

[student]
layers =
    dense 2 3 relu
    dense 3 3
input_shape = 2

[method]
kind = attention
"""


def _with(extra: str, base: str = MINIMAL) -> str:
    return base + "\n" + extra


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.method.kind is MapKind.ATTENTION
    assert cfg.scheduler.mode is SchedulerMode.NONE
    assert cfg.scheduler.base_lr == cfg.training.base_lr == 0.1
    assert cfg.training.loss_weight == 1.0 and cfg.training.differentiable_maps is None


@pytest.mark.parametrize("name", REFERENCE_CONFIGS)
def test_reference_configs_round_trip(name):
    cfg = load_config(reference_config(name))
    assert parse_config(dump_config(cfg)) == cfg


@given(
    st.sampled_from(list(MapKind)),
    st.sampled_from(list(SchedulerMode)),
    st.floats(0.0, 1.0),
    st.floats(1e-4, 0.5),
    st.integers(0, 2**31),
    st.sampled_from([None, True, False]),
)
def test_round_trip_property(kind, mode, gamma, lr, seed, diff):
    text = _with(
        f"[scheduler]\nmode = {mode.value}\ngamma = {gamma!r}\nalpha_max = 1.0\n"
        f"[training]\nbase_lr = {lr!r}\nseed = {seed}\n"
        f"differentiable_maps = {'auto' if diff is None else str(diff).lower()}\n"
    ).replace("kind = attention", f"kind = {kind.value}")
    cfg = parse_config(text)
    assert parse_config(dump_config(cfg)) == cfg


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError) as info:
        parse_config(_with("[scheduler]\ngama = 0.9\n"))
    assert info.value.field == "scheduler.gama"


def test_unknown_section():
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config(_with("[optimizer]\nmomentum = 0.9\n"))


def test_missing_required_key():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("kind = attention", ""))
    assert info.value.field == "method.kind"


@pytest.mark.parametrize("extra, field", [
    ("[scheduler]\ngamma = 1.5\n", "scheduler"),
    ("[training]\nepochs = -1\n", "training.epochs"),
    ("[training]\nlambda = -0.5\n", "training.lambda"),
    ("[training]\ndifferentiable_maps = maybe\n", "training.differentiable_maps"),
    ("[method]\nhessian_output = logprobs\n", "method.hessian_output"),
])
def test_bad_values_name_the_field(extra, field):
    text = MINIMAL.replace("[method]\nkind = attention", "") + "\n[method]\nkind = attention\n"
    if extra.startswith("[method]"):
        text = text.replace("[method]\nkind = attention\n", "[method]\nkind = attention\n" + extra.split("\n", 1)[1])
    else:
        text += extra
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field


def test_class_count_mismatch():
    with pytest.raises(ConfigError, match="logits"):
        parse_config(MINIMAL.replace("num_classes = 3", "num_classes = 4"))


def test_input_shape_mismatch():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("name = spirals", "name = blobs\ndim = 3"))
    assert info.value.field == "teacher.input_shape"


def test_student_deeper_than_teacher_rejected():
    text = MINIMAL.replace("    dense 2 8 relu\n    dense 8 3 relu\n    dense 3 3", "    dense 2 3")
    with pytest.raises(ConfigError, match="fewer"):
        parse_config(text)


def test_bad_layer_line():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("dense 2 3 relu", "dense 2 3 tanh"))
    assert info.value.field == "student.layers"


def test_missing_file_mentions_path(tmp_path):
    path = tmp_path / "nowhere.ini"
    with pytest.raises(ConfigError, match="nowhere.ini"):
        load_config(path)


def test_overrides():
    cfg = parse_config(MINIMAL)
    other = cfg.with_seed(9).with_mode("layerwise").with_kind("hessian")
    assert other.student.seed == other.training.seed == 9
    assert other.scheduler.mode is SchedulerMode.LAYERWISE and other.method.kind is MapKind.HESSIAN
    assert other.teacher == cfg.teacher
