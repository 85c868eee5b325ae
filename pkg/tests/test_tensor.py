import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _fd import gradcheck
from _gradcases import CASES, TOLERANCE
from cohortgraph import tensor as T
from cohortgraph.tensor import DimensionError, Tensor, no_grad


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        fn, arrays_ = CASES[name](rng)
        assert gradcheck(fn, arrays_, rng) < TOLERANCE


def test_matmul_examples():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    loop = np.array([[sum(x[i, k] * y[k, j] for k in range(3)) for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(T.matmul(Tensor(x), Tensor(y)).data, loop, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_examples():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 6))
    ident = np.zeros((2, 2, 3, 3))
    ident[0, 0, 1, 1] = ident[1, 1, 1, 1] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(ident)).data, x)
    assert not T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3)))).data.any()
    ones = T.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data[0]
    assert ones[2, 2] == 9 and ones[0, 0] == 4 and ones[0, 2] == 6
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(x), Tensor(np.zeros((1, 3, 3, 3))))


def test_elementwise_examples():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.reduce_sum(T.square(x)).backward()
    assert np.array_equal(x.grad, 2 * x.data)
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    masked = T.softmax(Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
    assert masked[1] == 0.0 and masked.sum() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_pooling_examples():
    assert T.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 4.0
    gap = T.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5))).data
    assert np.array_equal(gap, np.full((2, 3), 1.5))
    x = np.random.default_rng(2).standard_normal((1, 6))
    assert np.array_equal(T.reduce_max(Tensor(x), axis=0).data, x[0])
    with pytest.raises(DimensionError):
        T.maxpool2d(Tensor(np.zeros((1, 3, 3))))


def test_dropout_modes():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.1, training=False, rng=None) is x
    out = T.dropout(x, 0.1, True, np.random.default_rng(0)).data
    np.testing.assert_allclose(np.unique(out), [0.0, 1 / 0.9])
    assert abs(out.mean() - 1.0) < 0.02
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, True, None)


def test_batchnorm_tracks_running_statistics():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(4.0, 2.0, size=(500, 2)))
    mean, var = np.zeros(2), np.ones(2)
    out = T.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(mean, 0.1 * x.data.mean(axis=0))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.data.var(axis=0, ddof=1))
    frozen = mean.copy()
    T.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, False)
    assert np.array_equal(mean, frozen)


def test_backward_examples():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    T.reduce_sum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    assert unused.grad is None or not unused.grad.any()
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_twice_doubles_gradients():
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    loss = T.reduce_sum(T.tanh(T.matmul(Tensor(rng.standard_normal((4, 3))), w)))
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2 * once)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)
    z.sum().backward()
    assert x.grad.item() == 8.0


def test_composite_mlp_gradient():
    from _gradcases import _linear

    rng = np.random.default_rng(5)
    w1, w2 = rng.standard_normal((4, 6)), rng.standard_normal((6, 1))
    x = rng.standard_normal((5, 4))

    def mlp(a, b):
        return T.bce_with_logits(T.matmul(T.leaky_relu(T.matmul(Tensor(x), a), 0.01), b), np.ones((5, 1)))

    assert gradcheck(mlp, [w1, w2], rng) < 1e-4
    assert _linear  # the layer catalogue is importable alongside


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = T.grad_enabled()

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not T.grad_enabled()
    assert seen["worker"] and T.grad_enabled()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = T.exp(x)
    assert y._parents == ()
