import numpy as np
import pytest

from helpers import make_model, make_spec, param_arrays, rel_err, set_params
from lwdistill import tensor as T
from lwdistill.data import generate_spirals
from lwdistill.divergence import cross_entropy
from lwdistill.engine import (
    DistillationRun,
    MapCache,
    TrainingDiverged,
    composite_loss,
    default_differentiable,
    probe_indices,
    probe_jsd,
    run_distillation,
    train_model,
    train_teacher,
)
from lwdistill.maps import MapKind
from lwdistill.network import build_model, pair_crucial_layers, save_checkpoint
from lwdistill.oracle import fd_gradient
from lwdistill.scheduler import SchedulerConfig, aggregate_epoch_jsd, update_layer_lr

STUDENT = ["dense 2 6 relu", "dense 6 3 relu", "dense 3 3"]
TEACHER = ["dense 2 8 relu", "dense 8 6 relu", "dense 6 3 relu", "dense 3 3"]


@pytest.fixture(scope="module")
def data():
    return generate_spirals(20, 3, 0.05, seed=0)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(make_spec(TEACHER, (2,), seed=1), data, epochs=20, lr=0.1, seed=1, batch_size=16)


def _student(seed=2):
    return make_model(STUDENT, (2,), seed=seed)


def _run(teacher, data, kind="attention", mode="none", epochs=4, lam=1.0, seed=0, student=None, **kw):
    student = student if student is not None else _student()
    sched = SchedulerConfig(mode=mode, base_lr=0.05, update_interval_epochs=2, alpha_max=0.5)
    pairing = pair_crucial_layers(student, teacher, data.inputs[:1])
    return DistillationRun(student, teacher, pairing, kind, sched, epochs, batch_size=16,
                           loss_weight=lam, seed=seed, **kw)


def test_pairing_of_fixture_nets(teacher, data):
    assert pair_crucial_layers(_student(), teacher, data.inputs[:1]).pairs == ((0, 1), (1, 2))


def test_default_differentiability():
    assert default_differentiable("attention") and default_differentiable("jacobian")
    assert not default_differentiable("hessian")


# ---------------------------------------------------------------- ablation identities


def test_zero_weight_is_plain_training(teacher, data):
    plain = _student()
    history = train_model(plain, data, epochs=4, lr=0.05, batch_size=16, seed=0)
    run = _run(teacher, data, lam=0.0)
    results = run_distillation(run, data)
    for a, b in zip(param_arrays(plain), param_arrays(run.student)):
        assert a.tobytes() == b.tobytes()
    assert [h.test_accuracy for h in history] == [r.test_accuracy for r in results]
    assert [h.train_loss for h in history] == [r.train_loss for r in results]


@pytest.mark.parametrize("kind", list(MapKind))
def test_zero_weight_total_is_cross_entropy(teacher, data, kind):
    s = _student()
    x, y = data.inputs[:10], data.labels[:10]
    pairing = pair_crucial_layers(s, teacher, x[:1])
    total, per_layer = composite_loss(s, teacher, pairing, kind, x, y, 0.0)
    assert total.item() == cross_entropy(s.forward(x), y).item()
    assert set(per_layer) == {0, 1}


@pytest.mark.parametrize("kind", list(MapKind))
@pytest.mark.parametrize("differentiable", [True, False])
def test_self_distillation_is_zero(teacher, data, kind, differentiable):
    student = teacher.copy()
    x, y = data.inputs[:12], data.labels[:12]
    pairing = pair_crucial_layers(student, teacher, x[:1])
    assert all(s == t for s, t in pairing.pairs)
    _, per_layer = composite_loss(student, teacher, pairing, kind, x, y, 1.0, differentiable=differentiable)
    assert max(per_layer.values()) <= 1e-12
    run = DistillationRun(student, teacher, pairing, kind, SchedulerConfig(), 0)
    assert max(probe_jsd(run, x).values()) <= 1e-9


@pytest.mark.parametrize("kind", list(MapKind))
@pytest.mark.parametrize("lam", [0.3, 2.0])
def test_loss_decomposition(teacher, data, kind, lam):
    s = _student()
    x, y = data.inputs[5:25], data.labels[5:25]
    pairing = pair_crucial_layers(s, teacher, x[:1])
    total, per_layer = composite_loss(s, teacher, pairing, kind, x, y, lam)
    ce = cross_entropy(s.forward(x), y).item()
    assert abs(total.item() - (ce + lam * sum(per_layer.values()))) <= 1e-10


@pytest.mark.parametrize("kind", [MapKind.ATTENTION, MapKind.JACOBIAN])
def test_composite_gradient_matches_fd(teacher, data, kind):
    s = _student(seed=5)
    x, y = data.inputs[::10], data.labels[::10]
    pairing = pair_crucial_layers(s, teacher, x[:1])
    params = param_arrays(s)

    def total(arrays):
        set_params(s, arrays)
        with T.no_grad():
            return composite_loss(s, teacher, pairing, kind, x, y, 1.0)[0].item()

    set_params(s, params)
    with T.Tape() as tape:
        out, _ = composite_loss(s, teacher, pairing, kind, x, y, 1.0)
    analytic = [g.data for g in tape.gradient(out, s.parameters())]
    numeric = fd_gradient(total, params)
    assert rel_err(analytic, numeric) <= 1e-3


def test_gradients_reach_only_the_student(teacher, data):
    s = _student()
    x, y = data.inputs[:8], data.labels[:8]
    pairing = pair_crucial_layers(s, teacher, x[:1])
    with T.Tape() as tape:
        out, _ = composite_loss(s, teacher, pairing, "jacobian", x, y, 1.0)
    grads = tape.gradient(out, teacher.parameters())
    assert all(not np.any(g.data) for g in grads)


def test_map_cache_refresh_schedule():
    cache = MapCache(3)
    due = []
    for _ in range(7):
        due.append(cache.stale())
        cache.student = cache.teacher = {}
    assert due == [True, False, False, True, False, False, True]
    with pytest.raises(ValueError):
        MapCache(0)


# ---------------------------------------------------------------- the loop


def test_none_mode_keeps_alphas_constant(teacher, data):
    results = run_distillation(_run(teacher, data, mode="none", epochs=5), data)
    assert len(results) == 5
    assert {a for r in results for a in r.per_layer_alpha.values()} == {0.05}


def test_layerwise_alphas_move_only_on_interval_epochs(teacher, data):
    run = _run(teacher, data, mode="layerwise", epochs=6)
    results = run_distillation(run, data)
    prev = {j: 0.05 for j in run.pairing.student_layers}
    for r in results:
        if r.epoch % 2:
            assert r.per_layer_alpha == prev
        prev = r.per_layer_alpha
    assert results[1].per_layer_alpha != {j: 0.05 for j in prev}


def test_scheduler_sees_window_mean_of_probe_jsd(teacher, data):
    run = _run(teacher, data, kind="jacobian", mode="layerwise", epochs=4)
    results = run_distillation(run, data)
    cfg = run.scheduler
    states = {j: None for j in run.pairing.student_layers}
    from lwdistill.scheduler import init_states

    states = init_states(run.pairing.student_layers, cfg)
    for end in (2, 4):
        mean = aggregate_epoch_jsd([r.per_layer_jsd for r in results[end - 2 : end]])
        states = {j: update_layer_lr(states[j], mean[j], cfg) for j in states}
        assert results[end - 1].per_layer_alpha == {j: states[j].alpha for j in states}


@pytest.mark.parametrize("kind", list(MapKind))
def test_runs_are_deterministic(teacher, data, kind):
    a = run_distillation(_run(teacher, data, kind=kind, mode="layerwise", epochs=2), data)
    b = run_distillation(_run(teacher, data, kind=kind, mode="layerwise", epochs=2), data)
    assert a == b


def test_teacher_is_untouched(teacher, data):
    before = teacher.checksum()
    run_distillation(_run(teacher, data, kind="jacobian", epochs=2), data)
    assert teacher.checksum() == before


def test_zero_epochs_is_a_no_op(teacher, data):
    run = _run(teacher, data, epochs=0)
    before = run.student.checksum()
    assert run_distillation(run, data) == []
    assert run.student.checksum() == before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostics(teacher, data):
    student = _student()
    pairing = pair_crucial_layers(student, teacher, data.inputs[:1])
    sched = SchedulerConfig(base_lr=1e150, alpha_max=1e151)
    run = DistillationRun(student, teacher, pairing, "attention", sched, 3, batch_size=16)
    with pytest.raises(TrainingDiverged) as info:
        run_distillation(run, data)
    assert info.value.epoch == 1
    assert "layer alphas" in str(info.value)


def test_probe_is_fixed_subset_of_test_split(data):
    idx = probe_indices(data, seed=3, size=8)
    assert np.array_equal(idx, probe_indices(data, seed=3, size=8))
    assert set(idx) <= set(data.test_idx.tolist()) and len(idx) == 8
    assert len(probe_indices(data, 0, 10_000)) == len(data.test_idx)


def test_run_validation(teacher, data):
    s = _student()
    pairing = pair_crucial_layers(s, teacher, data.inputs[:1])
    with pytest.raises(ValueError):
        DistillationRun(s, teacher, pairing, "attention", SchedulerConfig(), -1)
    with pytest.raises(ValueError):
        DistillationRun(s, teacher, pairing, "attention", SchedulerConfig(), 1, loss_weight=-1.0)


def test_hessian_cache_runs(teacher, data):
    results = run_distillation(_run(teacher, data, kind="hessian", epochs=1, hessian_refresh=3), data)
    assert len(results) == 1 and all(v >= 0 for v in results[0].per_layer_jsd.values())


# ---------------------------------------------------------------- teacher


def test_teacher_zero_epochs_is_initialisation(data):
    spec = make_spec(TEACHER, (2,), seed=4)
    assert train_teacher(spec, data, 0, 0.1, seed=0).checksum() == build_model(spec).checksum()


def test_teacher_checkpoints_are_reproducible(data, tmp_path):
    spec = make_spec(TEACHER, (2,), seed=4)
    a, b = tmp_path / "a.lwdl", tmp_path / "b.lwdl"
    train_teacher(spec, data, 2, 0.1, seed=0, checkpoint=str(a))
    train_teacher(spec, data, 2, 0.1, seed=0, checkpoint=str(b))
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_teacher_divergence_reports_epoch(data):
    spec = make_spec(TEACHER, (2,), seed=4)
    with pytest.raises(TrainingDiverged) as info:
        train_teacher(spec, data, 3, 1e200, seed=0)
    assert info.value.epoch == 1
