import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpvpr import tensor as T
from warpvpr.errors import GraphConsumed, MissingGrad, NotScalar, ShapeMismatch
from warpvpr.tensor import Adam, ParameterSet, Tensor

from oracles import adam_step, central_diff, conv2d_loops, rel_err


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    T.backward(out)
    return [t.grad for t in ts]


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert np.allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-12)


def test_conv_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(1, 3, 3, 3))

    def f(x, w, b):
        return T.tsum(T.mul(T.conv2d(x, w, b, stride=2, padding=1), proj))

    gx, gw, gb = grad_of(f, x, w, b)
    val = lambda x_, w_, b_: f(Tensor(x_), Tensor(w_), Tensor(b_)).item()  # noqa: E731
    assert rel_err(gx, central_diff(lambda a: val(a, w, b), x, 1e-5)) <= 1e-6
    assert rel_err(gw, central_diff(lambda a: val(x, a, b), w, 1e-5)) <= 1e-6
    assert rel_err(gb, central_diff(lambda a: val(x, w, a), b, 1e-5)) <= 1e-6


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_linear_identity_and_zero_weight():
    x = np.random.default_rng(2).normal(size=(4, 3))
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([1.0, -2.0])
    out = T.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b))
    assert np.array_equal(out.data, np.tile(b, (4, 1)))
    with pytest.raises(ShapeMismatch):
        T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b))


def test_linear_gradient():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    proj = rng.normal(size=(4, 3))

    def f(x, w, b):
        return T.tsum(T.mul(T.linear(x, w, b), proj))

    grads = grad_of(f, x, w, b)
    args = [x, w, b]
    for i, g in enumerate(grads):
        def val(a, i=i):
            xs = [Tensor(v) for v in args]
            xs[i] = Tensor(a)
            return f(*xs).item()
        assert rel_err(g, central_diff(val, args[i], 1e-5)) <= 1e-6


def test_relu_values_and_grad():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    (g,) = grad_of(lambda a: T.tsum(T.relu(a)), np.array([-1.0, -2.0, -0.5]))
    assert np.array_equal(g, np.zeros(3))
    (g,) = grad_of(lambda a: T.tsum(T.relu(a)), np.array([-1.0, 0.0, 2.0]))
    assert g.tolist() == [0.0, 0.0, 1.0]
    x = np.array([-1.3, 0.7, 2.1, -0.2])
    (g,) = grad_of(lambda a: T.tsum(T.mul(T.relu(a), a)), x)
    num = central_diff(lambda a: float((np.maximum(a, 0) * a).sum()), x)
    assert rel_err(g, num) <= 1e-6


def test_l2_normalize():
    assert np.allclose(T.l2_normalize(Tensor([3.0, 4.0]), axis=0).data, [0.6, 0.8])
    (g,) = grad_of(lambda a: T.tsum(T.l2_normalize(a, axis=0, eps=1e-8)), np.zeros(3))
    assert np.all(np.isfinite(g))
    assert np.array_equal(T.l2_normalize(Tensor(np.zeros(3)), axis=0, eps=1e-8).data, np.zeros(3))
    rng = np.random.default_rng(4)
    x, proj = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    (g,) = grad_of(lambda a: T.tsum(T.mul(T.l2_normalize(a, axis=1), proj)), x)
    num = central_diff(lambda a: T.tsum(T.mul(T.l2_normalize(Tensor(a), axis=1), proj)).item(), x)
    assert rel_err(g, num) <= 1e-5


def test_backward_basics():
    (g,) = grad_of(lambda w: T.tsum(w), np.array([1.0, 2.0, 3.0]))
    assert g.tolist() == [1.0, 1.0, 1.0]
    (g,) = grad_of(lambda w: T.tsum(T.mul(w, w)), np.array([1.0, 2.0]))
    assert g.tolist() == [2.0, 4.0]


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalar):
        T.backward(T.mul(w, 2.0))
    loss = T.tsum(T.mul(w, w))
    T.backward(loss)
    with pytest.raises(GraphConsumed):
        T.backward(loss)


def test_backward_accumulates_exactly_twice():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = rng.normal(size=(2, 4))
    loss = T.tsum(T.relu(T.linear(Tensor(x), w, Tensor(np.zeros(3)))))
    T.backward(loss, retain_graph=True)
    once = w.grad.copy()
    T.backward(loss)
    assert np.array_equal(w.grad, 2 * once)


def test_full_pipeline_gradient():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 6, 6))
    cw, cb = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    lw, lb = rng.normal(size=(2, 27)), rng.normal(size=2)

    def f(cw, cw_b, lw, lb):
        h = T.relu(T.conv2d(Tensor(x), cw, cw_b, stride=2, padding=1))
        out = T.linear(T.reshape(h, (2, 27)), lw, lb)
        return T.tsum(T.mul(out, out))

    grads = grad_of(f, cw, cb, lw, lb)
    args = [cw, cb, lw, lb]
    for i, g in enumerate(grads):
        def val(a, i=i):
            xs = [Tensor(v) for v in args]
            xs[i] = Tensor(a)
            return f(*xs).item()
        assert rel_err(g, central_diff(val, args[i], 1e-6)) <= 1e-5


def test_no_broadcast_beyond_bias():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_adam_zero_grad_keeps_params():
    ps = ParameterSet()
    ps.add("w", np.array([1.0, -2.0]))
    ps["w"].grad = np.zeros(2)
    Adam(ps, lr=0.1).step()
    assert ps["w"].data.tolist() == [1.0, -2.0]


def test_adam_matches_hand_rolled():
    ps = ParameterSet()
    ps.add("w", np.array([0.5]))
    opt = Adam(ps, lr=0.01)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 0.7], start=1):
        ps["w"].grad = np.array([g])
        opt.step()
        x, m, v = adam_step(x, g, m, v, t, 0.01)
        assert abs(ps["w"].data[0] - x) < 1e-15


def test_adam_missing_grad():
    ps = ParameterSet()
    ps.add("w", np.ones(2))
    with pytest.raises(MissingGrad):
        Adam(ps).step()


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(7)
        ps = ParameterSet()
        ps.add("w", rng.normal(size=(3, 3)))
        opt = Adam(ps, lr=1e-2)
        for _ in range(5):
            ps.zero_grads()
            T.backward(T.tsum(T.mul(ps["w"], ps["w"])))
            opt.step()
        return ps["w"].data.copy()

    assert np.array_equal(run(), run())


def test_parameter_set_order_and_names():
    ps = ParameterSet()
    ps.add("b", np.zeros(1))
    ps.add("a", np.zeros(2))
    assert ps.names() == ["b", "a"]
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_sum_of_squares_gradient_property(vals):
    x = np.array(vals)
    (g,) = grad_of(lambda a: T.tsum(T.mul(a, a)), x)
    assert np.allclose(g, 2 * x)


def test_grad_shape_and_dtype_match():
    w = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(T.mul(w, w)))
    assert w.grad.shape == w.shape and w.grad.dtype == np.float32
