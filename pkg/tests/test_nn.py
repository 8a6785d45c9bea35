import numpy as np
import pytest

from hetsim.nn import AdamState, DenseLayer, DivergenceError, EmbeddingTable, Mlp, adam_step, grad_check


def test_identity_forward():
    net = Mlp([DenseLayer(np.eye(2), np.zeros(2))])
    y, _ = net.forward(np.array([1.0, 2.0]))
    assert np.array_equal(y, [1.0, 2.0])


def test_single_dense_forward():
    net = Mlp([DenseLayer([[1.0, -1.0]], [0.5])])
    assert net(np.array([2.0, 1.0])) == pytest.approx([1.5])


def test_zero_input_zero_bias_gives_zero():
    net = Mlp.init([3, 16, 16, 2], np.random.default_rng(0))
    assert np.all(net(np.zeros(3)) == 0)


def test_forward_is_pure():
    net = Mlp.init([4, 32, 5], np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(7, 4))
    assert np.array_equal(net(x), net(x))


def test_shape_errors():
    net = Mlp.init([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(np.zeros(4))
    with pytest.raises(ValueError):
        Mlp([DenseLayer(np.eye(2), np.zeros(2)), DenseLayer(np.eye(3), np.zeros(3))])
    other = Mlp.init([3, 4, 2], np.random.default_rng(0))
    _, tape = net.forward(np.zeros(3))
    with pytest.raises(ValueError):
        other.backward(tape, np.zeros(2))


def test_zero_output_grad():
    net = Mlp.init([3, 8, 2], np.random.default_rng(0))
    _, tape = net.forward(np.ones((5, 3)))
    grads, dx = net.backward(tape, np.zeros((5, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def _mlp_check(net, x, target):
    def loss():
        y = net(x)
        return float(np.sum((y - target) ** 2))

    y, tape = net.forward(x)
    grads, _ = net.backward(tape, 2 * (y - target))
    return grad_check(net.parameters(), loss, grads)


def test_linear_net_gradient_is_exact():
    rng = np.random.default_rng(3)
    net = Mlp([DenseLayer(rng.normal(size=(1, 1)), [0.0])])
    report = _mlp_check(net, np.array([[1.0]]), np.zeros((1, 1)))
    assert report.max_rel_err < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([3, 12, 4], rng)
    for layer in net.layers:
        layer.b[:] = rng.normal(scale=0.1, size=layer.b.shape)
    report = _mlp_check(net, rng.normal(size=(6, 3)), rng.normal(size=(6, 4)))
    assert report.passed, report


def test_input_gradient():
    rng = np.random.default_rng(5)
    net = Mlp.init([3, 10, 2], rng)
    x = rng.normal(size=3)
    y, tape = net.forward(x)
    _, dx = net.backward(tape, np.ones(2))
    h = 1e-6
    fd = [(net(x + h * e).sum() - net(x - h * e).sum()) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(dx, fd, rtol=1e-6)


def test_corrupted_gradient_fails_check():
    rng = np.random.default_rng(0)
    net = Mlp.init([3, 8, 2], rng)
    x, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    y, tape = net.forward(x)
    grads, _ = net.backward(tape, 2 * (y - target))
    report = grad_check(net.parameters(), lambda: float(np.sum((net(x) - target) ** 2)), [2 * g for g in grads])
    assert not report.passed


def test_adam_zero_grad_is_fixed_point():
    p = [np.array([1.0, -2.0])]
    st = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], [1.0, -2.0]) and st.t == 1


def test_adam_first_step():
    p = [np.array([0.0])]
    st = AdamState.for_params(p, lr=0.001)
    adam_step(p, [np.array([1.0])], st)
    # m_hat = v_hat = 1 after bias correction
    assert p[0][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_monotone_under_constant_grad():
    p = [np.array([0.0])]
    st = AdamState.for_params(p)
    adam_step(p, [np.array([1.0])], st)
    first = p[0][0]
    adam_step(p, [np.array([1.0])], st)
    assert p[0][0] < first < 0


def test_adam_rejects_bad_grads():
    p = [np.zeros(2)]
    st = AdamState.for_params(p)
    with pytest.raises(DivergenceError):
        adam_step(p, [np.array([np.nan, 0.0])], st)
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], st)


def test_embedding_lookup_and_backward():
    table = EmbeddingTable(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(table.lookup([2, 0]), [[4, 5], [0, 1]])
    g = table.backward(np.array([1, 1, 2]), np.ones((3, 2)))
    assert np.array_equal(g, [[0, 0], [2, 2], [1, 1]])
    with pytest.raises(IndexError):
        table.lookup([3])
