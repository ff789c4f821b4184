from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmcc import autodiff as ad
from mmcc.autodiff import DenseLayer, Graph, Network, Tensor, grouped_softmax
from mmcc.errors import ConfigurationError, DimensionError, UsageError

from conftest import central_difference, grad_close, network_gradient_check, random_network, reverse_grad


def test_identity_network_passes_input_through():
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    v = np.array([0.5, -2.0, 7.25])
    np.testing.assert_array_equal(Network([layer])(v).data, v)


def test_relu_layer_clips_negatives():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    np.testing.assert_array_equal(Network([layer])(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_six_layer_fbsde_shape(rng):
    net = Network.mlp([100, 110, 120, 120, 110, 100], rng)
    assert len(net.layers) == 5
    assert net(rng.normal(size=100)).shape == (100,)
    assert net(rng.normal(size=(7, 100))).shape == (7, 100)


def test_shape_mismatch_names_layer(rng):
    net = Network.mlp([3, 4, 2], rng)
    with pytest.raises(DimensionError, match="layer 0"):
        net(np.ones((2, 5)))


def test_inconsistent_layers_rejected(rng):
    with pytest.raises(DimensionError):
        Network([DenseLayer.init(3, 4, "relu", rng), DenseLayer.init(5, 2, "identity", rng)])


def test_linear_gradient():
    w = Tensor(np.array(2.0), requires_grad=True)
    with Graph() as g:
        y = w * 3.0
    assert g.backward(y)[w] == pytest.approx(3.0)


def test_relu_subgradient_at_zero_is_zero():
    (gx,) = reverse_grad(ad.relu, np.array([0.0, -1.0, 1.0]))
    np.testing.assert_array_equal(gx, [0.0, 0.0, 1.0])
    w = Tensor(np.zeros((1, 1)), requires_grad=True)
    with Graph() as g:
        out = ad.dense(Tensor(np.ones((1, 1))), w, Tensor(np.zeros(1)), "relu").sum()
    assert g.backward(out)[w][0, 0] == 0.0


def test_backward_without_forward_is_usage_error():
    with pytest.raises(UsageError):
        Graph().backward(Tensor(np.ones(2), requires_grad=True))


def test_backward_on_other_graph_is_usage_error():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph():
        y = (x * 2.0).sum()
    with pytest.raises(UsageError):
        Graph().backward(y)


def test_seed_shape_checked():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = x * 2.0
    with pytest.raises(DimensionError):
        g.backward(y, np.ones(2))


@pytest.mark.parametrize("activation", ["identity", "relu", "sigmoid", "grouped_softmax"])
def test_network_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(["identity", "relu", "sigmoid", "grouped_softmax"].index(activation))
    failures = 0
    for _ in range(100):
        net = random_network(rng, activation)
        x = rng.normal(size=(3, net.n_in))
        w = rng.normal(size=(3, net.n_out))
        failures += not network_gradient_check(net, x, w)
    assert failures == 0


finite = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_elementwise_ops_gradients(a, b):
    for fn in (lambda x, y: x * y, lambda x, y: x - y * 2.0, lambda x, y: x / (y * y + 1.0),
               lambda x, y: ad.exp(x) + ad.sigmoid(y), lambda x, y: ad.tanh(x) * ad.square(y),
               lambda x, y: ad.log(x * x + 1.0) + ad.sqrt(y * y + 1.0), lambda x, y: (x * x + 1.0) ** 1.5):
        ga, gb = reverse_grad(fn, a, b)
        na = central_difference(lambda v: float(fn(Tensor(v), Tensor(b)).sum().data), a)
        nb = central_difference(lambda v: float(fn(Tensor(a), Tensor(v)).sum().data), b)
        assert grad_close(ga, na, abs_=1e-6) and grad_close(gb, nb, abs_=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_structural_ops_gradients(a, b):
    fns = [
        lambda x, y: ad.matmul(x, y) ** 2,
        lambda x, y: ad.concat([x[:, :2], y.sum(axis=1, keepdims=True).reshape(1, 3)[:, :2] + x[:, 2:3]], axis=1),
        lambda x, y: ad.stack([x[:, 0], x[:, 1] * 3.0], axis=1) * x[[0, 0, 1, 3], :2],
        lambda x, y: x.mean(axis=0) * y[:, 0],
    ]
    for fn in fns:
        ga, gb = reverse_grad(fn, a, b)
        na = central_difference(lambda v: float(fn(Tensor(v), Tensor(b)).sum().data), a)
        nb = central_difference(lambda v: float(fn(Tensor(a), Tensor(v)).sum().data), b)
        assert grad_close(ga, na, abs_=1e-6) and grad_close(gb, nb, abs_=1e-6)


def test_state_transition_backprop_through_time():
    # s_{k+1} = s_k * w + sin-free nonlinearity; gradient flows through all steps
    w = np.array([0.9])

    def run(wv):
        s = Tensor(np.array([1.0]))
        wt = wv if isinstance(wv, Tensor) else Tensor(wv)
        for _ in range(5):
            s = s * wt + ad.sigmoid(s)
        return s.sum()

    wt = Tensor(w.copy(), requires_grad=True)
    with Graph() as g:
        out = run(wt)
    num = central_difference(lambda v: float(run(v).data), w)
    assert grad_close(g.backward(out)[wt], num)


def test_grouped_softmax_symmetric():
    out = grouped_softmax(np.zeros(3), [[0, 1, 2]], [1.0]).data
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_grouped_softmax_two_groups():
    out = grouped_softmax(np.array([0.0, 0.0, 7.0]), [[0, 1], [2]], [2.0, 5.0]).data
    np.testing.assert_allclose(out, [1.0, 1.0, 5.0], rtol=0, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-700, 700, allow_nan=False)),
       arrays(np.float64, 3, elements=st.floats(1e-3, 1e3)))
def test_grouped_softmax_positive_and_normalized(raw, scales):
    groups = [[0, 3], [1], [2, 4, 5]]
    out = grouped_softmax(raw, groups, scales).data
    assert np.all(out > 0)
    for k, gr in enumerate(groups):
        np.testing.assert_allclose(out[:, gr].sum(axis=1), scales[k], rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-50, 50, allow_nan=False)))
def test_single_group_sums_to_one(raw):
    assert abs(grouped_softmax(raw, [[0, 1, 2, 3]], [1.0]).data.sum() - 1.0) <= 1e-12


def test_grouped_softmax_gradient_including_scales(rng):
    raw, sc = rng.normal(size=(3, 5)), rng.uniform(0.5, 2, size=(3, 2))
    groups = [[0, 2], [1, 3, 4]]
    w = rng.normal(size=(3, 5))
    fn = lambda r, s: grouped_softmax(r, groups, s) * w  # noqa: E731
    gr, gs = reverse_grad(fn, raw, sc)
    assert grad_close(gr, central_difference(lambda v: float(fn(Tensor(v), Tensor(sc)).sum().data), raw))
    assert grad_close(gs, central_difference(lambda v: float(fn(Tensor(raw), Tensor(v)).sum().data), sc))


@pytest.mark.parametrize("groups,scales", [([[0, 1], []], [1, 1]), ([[0, 1]], [1.0]), ([[0, 1, 2]], [-1.0])])
def test_grouped_softmax_bad_configuration(groups, scales):
    with pytest.raises(ConfigurationError):
        grouped_softmax(np.zeros(3), groups, scales)


def test_forward_is_deterministic(rng):
    net = Network.mlp([4, 8, 8, 3], rng, hidden_activation="sigmoid")
    x = rng.normal(size=(16, 4))
    a, b = net(x).data, net(x.copy()).data
    assert a.tobytes() == b.tobytes()
    with Graph() as g:
        c = ad.forward(g, net, x).data
    assert c.tobytes() == a.tobytes()


def test_snapshot_round_trip_is_bit_exact(rng):
    net = Network.mlp([3, 5, 4], rng, hidden_activation="sigmoid")
    net.layers.append(DenseLayer.init(4, 3, "grouped_softmax", rng, groups=[[0], [1, 2]]))
    blob = ad.dump_snapshot(net)
    assert blob[:4] == b"MMCC"
    assert int.from_bytes(blob[4:8], "little") == 1
    back = ad.load_snapshot(blob, groups=[[0], [1, 2]])
    assert [layer.activation for layer in back.layers] == ["sigmoid", "identity", "grouped_softmax"]
    assert back.get_vector().tobytes() == net.get_vector().tobytes()
    assert ad.dump_snapshot(back) == blob
    x = rng.normal(size=(5, 3))
    assert back(x).data.tobytes() == net(x).data.tobytes()


def test_snapshot_layout_header_fields():
    layer = DenseLayer(np.array([[1.0, 2.0]]), np.array([3.0]), "relu")
    blob = ad.dump_snapshot([layer])
    assert blob == (b"MMCC" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.0, 2.0, 3.0], "<f8").tobytes() + bytes([1]))


def test_snapshot_bad_magic():
    with pytest.raises(UsageError):
        ad.load_snapshot(b"XXXX\x01\x00\x00\x00")


def test_glorot_initialization_bounds(rng):
    layer = DenseLayer.init(30, 20, "relu", rng)
    lim = np.sqrt(6 / 50)
    assert np.all(np.abs(layer.weight.data) <= lim)
    assert np.all(layer.bias.data == 0)


def test_custom_primitive_uses_supplied_vjp():
    def cube(x):
        return ad.custom(x.data ** 3, (x,), lambda g: (3 * x.data ** 2 * g,))
    a = np.array([[0.5, -1.0, 2.0]])
    (ga,) = reverse_grad(lambda x: cube(x) * 2.0, a)
    np.testing.assert_allclose(ga, 6 * a ** 2)


def test_custom_primitive_checks_gradient_count():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        out = ad.custom(x.data * 2, (x, Tensor(np.ones(2))), lambda gr: (gr,)).sum()
    with pytest.raises(UsageError):
        g.backward(out)
