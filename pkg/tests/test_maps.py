import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import make_model, param_arrays, rel_err, set_params
from lwdistill import tensor as T
from lwdistill.divergence import jsd
from lwdistill.maps import (
    LayerMap,
    MapError,
    MapKind,
    attention_map,
    derivative_raw,
    extract_pair_maps,
    hessian_map,
    jacobian_map,
    model_maps,
    normalize,
)
from lwdistill.network import pair_crucial_layers
from lwdistill.oracle import fd_gradient, fd_hessian_diag


# ---------------------------------------------------------------- attention


def test_attention_channel_sum_example():
    m = attention_map(np.array([[[1.0, 2.0]], [[2.0, 1.0]]]))
    np.testing.assert_allclose(m.values, [0.5, 0.5])


def test_attention_single_channel_example():
    m = attention_map(np.array([[[3.0, 4.0]]]))
    np.testing.assert_allclose(m.values, [0.36, 0.64], rtol=1e-15)


def test_attention_all_zero_is_uniform():
    m = attention_map(np.zeros((2, 2, 2)))
    assert np.array_equal(m.values, np.full(4, 0.25))


def test_attention_rejects_nan():
    with pytest.raises(ValueError):
        attention_map(np.array([1.0, np.nan]))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3)),
                  elements=st.floats(-10, 10)), st.randoms())
def test_attention_invariant_to_channel_permutation(a, rnd):
    perm = list(range(a.shape[0]))
    rnd.shuffle(perm)
    np.testing.assert_allclose(attention_map(a).values, attention_map(a[perm]).values, rtol=1e-12, atol=1e-15)


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_normalized_maps_are_distributions(raw):
    p = normalize(np.abs(raw))
    assert (p >= 0).all() and abs(p.sum() - 1) <= 1e-9


def test_layer_map_rejects_non_distribution():
    with pytest.raises(ValueError):
        LayerMap(0, "attention", np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        LayerMap(0, "attention", np.array([1.5, -0.5]))


# ---------------------------------------------------------------- jacobian


def _linear_identity():
    # a 2 -> 2 identity layer is not crucial, so pad the weight to 2 -> 3 with a
    # zero row; the extra row only contributes a third, equally sized class
    m = make_model(["dense 2 3"], (2,))
    m.params["0.weight"].data = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    return m


@pytest.mark.parametrize("x", [[1.0, 0.0], [2.0, 0.0]])
def test_jacobian_linear_example(x):
    m = _linear_identity()
    raw = derivative_raw(m, [0], np.array([x]), MapKind.JACOBIAN)[0].data
    # per class: |x|^2 from the weight row plus 1 from the bias
    expect = np.full(3, x[0] ** 2 + 1.0)
    np.testing.assert_allclose(raw, expect)
    np.testing.assert_allclose(jacobian_map(m, 0, np.array([x])).values, np.full(3, 1 / 3))


def _fd_jacobian_raw(model, j, batch):
    params = model.layer_params(j)
    base = [p.data.copy() for p in params]
    c = model.num_classes
    raw = np.zeros(c)
    for k in range(c):
        def f(arrays, k=k):
            for p, a in zip(params, arrays):
                p.data = a
            with T.no_grad():
                return float(model.forward(batch).data[:, k].mean())
        g = fd_gradient(f, base)
        raw[k] = sum(float((gi**2).sum()) for gi in g)
    for p, a in zip(params, base):
        p.data = a
    return raw


def _fd_hessian_raw(model, j, batch, output="probs"):
    params = model.layer_params(j)
    base = [p.data.copy() for p in params]
    raw = np.zeros(model.num_classes)
    for k in range(model.num_classes):
        def f(arrays, k=k):
            for p, a in zip(params, arrays):
                p.data = a
            with T.no_grad():
                out = model.forward(batch)
                out = T.softmax(out, axis=-1) if output == "probs" else out
                return float(out.data[:, k].mean())
        d = fd_hessian_diag(f, base)
        raw[k] = sum(float(np.abs(di).sum()) for di in d)
    for p, a in zip(params, base):
        p.data = a
    return raw


def _smooth_batch(model, rng, shape, n=3):
    """Batch whose relu inputs are all clear of the kink, so finite differences are valid."""
    from lwdistill.network import run_layers

    while True:
        x = rng.normal(size=(n,) + shape)
        with T.no_grad():
            _, traces = run_layers(model, x, keep=model.crucial_indices)
        if min(np.abs(t.pre.data).min() for t in traces.values()) > 1e-2:
            return x


def test_jacobian_matches_fd_dense(dense_net, rng):
    x = _smooth_batch(dense_net, rng, (3,))
    for j in dense_net.crucial_indices:
        raw = derivative_raw(dense_net, [j], x, MapKind.JACOBIAN)[j].data
        assert rel_err(raw, _fd_jacobian_raw(dense_net, j, x)) <= 1e-4


def test_jacobian_matches_fd_conv(conv_net, rng):
    x = _smooth_batch(conv_net, rng, (2, 4, 4))
    for j in conv_net.crucial_indices:
        raw = derivative_raw(conv_net, [j], x, MapKind.JACOBIAN)[j].data
        assert rel_err(raw, _fd_jacobian_raw(conv_net, j, x)) <= 1e-4


# ---------------------------------------------------------------- hessian


def test_hessian_of_logits_is_uniform_for_piecewise_linear_nets(dense_net, rng):
    m = hessian_map(dense_net, 0, rng.normal(size=(4, 3)), output="logits")
    np.testing.assert_allclose(m.values, np.full(3, 1 / 3))


def test_hessian_purely_linear_model_is_uniform(rng):
    m = make_model(["dense 3 2"], (3,))
    out = hessian_map(m, 0, rng.normal(size=(2, 3)), output="logits", method="double_backward")
    np.testing.assert_allclose(out.values, [0.5, 0.5])


def test_hessian_symmetric_quadratic_is_balanced():
    # two classes whose softmax probabilities mirror each other have equal curvature mass
    m = make_model(["dense 1 2"], (1,))
    m.params["0.weight"].data = np.array([[0.7], [-0.7]])
    x = np.array([[1.0], [-1.0]])
    np.testing.assert_allclose(hessian_map(m, 0, x).values, [0.5, 0.5], atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_hessian_matches_fd_on_hidden_layer_net(seed):
    rng = np.random.default_rng(seed)
    m = make_model(["dense 3 4 relu", "dense 4 3"], (3,), seed)
    x = _smooth_batch(m, rng, (3,))
    for j in m.crucial_indices:
        raw = derivative_raw(m, [j], x, MapKind.HESSIAN)[j].data
        assert rel_err(raw, _fd_hessian_raw(m, j, x)) <= 1e-3


def test_hessian_identity_agrees_with_double_backward(conv_net, rng):
    x = rng.normal(size=(2, 2, 4, 4))
    for j in conv_net.crucial_indices:
        a = hessian_map(conv_net, j, x).values
        b = hessian_map(conv_net, j, x, method="double_backward").values
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_hessian_identity_agrees_with_double_backward_dense(dense_net, rng):
    x = rng.normal(size=(3, 3))
    for j in dense_net.crucial_indices:
        np.testing.assert_allclose(
            hessian_map(dense_net, j, x).values,
            hessian_map(dense_net, j, x, method="double_backward").values,
            rtol=1e-9,
        )


# ---------------------------------------------------------------- invariants


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_jacobian_invariant_to_logit_scale(scale, seed):
    rng = np.random.default_rng(seed)
    m = make_model(["dense 3 5 relu", "dense 5 4 relu", "dense 4 3"], (3,), seed % 7)
    x = rng.normal(size=(4, 3))
    before = jacobian_map(m, 0, x).values
    # scaling the classifier scales every logit; positive homogeneity of relu keeps the path
    m.params["2.weight"].data = m.params["2.weight"].data * scale
    m.params["2.bias"].data = m.params["2.bias"].data * scale
    np.testing.assert_allclose(jacobian_map(m, 0, x).values, before, rtol=1e-9, atol=1e-15)


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_logit_hessian_invariant_to_logit_scale(scale, seed):
    rng = np.random.default_rng(seed)
    m = make_model(["dense 3 5 relu", "dense 5 3"], (3,), seed % 7)
    x = rng.normal(size=(4, 3))
    before = hessian_map(m, 0, x, output="logits").values
    m.params["1.weight"].data = m.params["1.weight"].data * scale
    np.testing.assert_allclose(hessian_map(m, 0, x, output="logits").values, before, rtol=1e-9)


@given(st.integers(0, 10_000), st.sampled_from(list(MapKind)))
def test_maps_are_probability_vectors(seed, kind):
    rng = np.random.default_rng(seed)
    m = make_model(["conv 2 3 k3 s1 p1 relu", "avgpool 2", "conv 3 4 k3 s2 p1 relu", "flatten", "dense 4 3"], (2, 4, 4), seed % 5)
    maps = model_maps(m, m.crucial_indices, kind, rng.normal(size=(3, 2, 4, 4)))
    for v in maps.values():
        assert (v >= 0).all() and abs(v.sum() - 1) <= 1e-9


@pytest.mark.parametrize("kind", list(MapKind))
def test_self_pairing_gives_identical_maps(conv_net, rng, kind):
    x = rng.normal(size=(3, 2, 4, 4))
    pairing = pair_crucial_layers(conv_net, conv_net, x)
    for s, t in extract_pair_maps(conv_net, conv_net, pairing, kind, x):
        assert np.array_equal(s.values, t.values)
        assert jsd(s, t) <= 1e-12


def test_reference_cnn_has_four_map_pairs(rng):
    from lwdistill.config import load_config
    from lwdistill.network import build_model
    from lwdistill.resources import reference_config

    cfg = load_config(reference_config("cnn"))
    teacher, student = build_model(cfg.teacher), build_model(cfg.student)
    x = rng.uniform(size=(2,) + tuple(cfg.teacher.input_shape))
    pairing = pair_crucial_layers(teacher, teacher, x)
    assert len(extract_pair_maps(teacher, teacher, pairing, MapKind.JACOBIAN, x)) == 4
    pairing = pair_crucial_layers(student, teacher, x)
    for s, t in extract_pair_maps(student, teacher, pairing, MapKind.ATTENTION, x):
        assert len(s) == len(t)


def test_extractor_errors_name_layers(dense_net):
    with pytest.raises(MapError, match=r"layers \[0, 1\]"):
        model_maps(dense_net, [0, 1], MapKind.JACOBIAN, np.ones((2, 7)))


# ---------------------------------------------------------------- differentiable maps


@pytest.mark.parametrize("kind", [MapKind.JACOBIAN, MapKind.HESSIAN])
def test_map_gradients_match_fd(kind, rng):
    m = make_model(["dense 3 4 relu", "dense 4 3"], (3,), 5)
    x = _smooth_batch(m, rng, (3,))
    w = rng.normal(size=3)
    base = param_arrays(m)

    def value(arrays):
        set_params(m, arrays)
        raw = derivative_raw(m, [0], x, kind)[0].data
        return float((normalize(raw) * w).sum())

    numeric = fd_gradient(value, base)
    set_params(m, base)
    with T.Tape() as tape:
        raw = derivative_raw(m, [0], x, kind, create_graph=True)[0]
        out = T.sum(T.mul(T.div(raw, T.sum(raw)), w))
    analytic = [g.data for g in tape.gradient(out, m.parameters())]
    assert rel_err(analytic, numeric) <= 1e-4
