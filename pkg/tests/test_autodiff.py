"""Core tensor/backward contracts: gradient flow, broadcasting, graph
traversal discipline, numeric stability of the row normalizers."""

import numpy as np
import pytest

from pagerec import autodiff as ad
from pagerec.autodiff import Tensor, backward


def test_sum_grad_all_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_elementwise_square_grad():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(ad.tsum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_broadcast_add_reduces_grad():
    x = Tensor(np.zeros((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    backward(ad.tsum(ad.add(x, b)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_broadcast_mul_keepdims_axis():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    s = Tensor(np.array([[2.0], [3.0]]), requires_grad=True)  # [2,1]
    backward(ad.tsum(ad.mul(x, s)))
    np.testing.assert_array_equal(x.grad, np.array([[2.0] * 3, [3.0] * 3]))
    np.testing.assert_array_equal(s.grad, np.array([[3.0], [3.0]]))


def test_diamond_graph_accumulates_once():
    # y = x*x + x*x: each path contributes 2x, total 4x; the shared node
    # must be visited exactly once by the topological traversal
    x = Tensor(np.array([3.0]), requires_grad=True)
    sq = ad.mul(x, x)
    y = ad.tsum(ad.add(sq, sq))
    backward(y)
    np.testing.assert_allclose(x.grad, [12.0])


def test_graph_freed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.tsum(ad.mul(x, x))
    backward(y)
    assert y._backward_fn is None and y._parents == ()


def test_graph_kept_when_requested():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.tsum(ad.mul(x, x))
    backward(y, free_graph=False)
    assert y._backward_fn is not None


def test_no_recording_without_requires_grad():
    x = Tensor(np.ones(3))
    y = ad.mul(x, x)
    assert y._backward_fn is None and not y.requires_grad


def test_matmul_shape_errors():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ValueError, match="2-D"):
        ad.matmul(Tensor(np.ones(3)), a)


def test_log_softmax_uniform_row():
    x = Tensor(np.zeros((1, 4)))
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(np.full((1, 4), 0.25)))


def test_log_softmax_extreme_logits_stable():
    x = Tensor(np.array([[1000.0, 0.0]]))
    y = ad.log_softmax(x).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, [[0.0, -1000.0]], atol=1e-12)


def test_log_softmax_rows_reexponentiate_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 7)) * 3)
    y = ad.log_softmax(x).data
    np.testing.assert_allclose(np.exp(y).sum(axis=1), np.ones(5), atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    y = ad.softmax_rows(Tensor(rng.standard_normal((4, 8)))).data
    np.testing.assert_allclose(y.sum(axis=1), np.ones(4), rtol=1e-12)


def test_narrow_and_concat_roundtrip():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    parts = [ad.narrow(x, 1, i * 2, 2) for i in range(3)]
    y = ad.concat(parts, axis=1)
    np.testing.assert_array_equal(y.data, x.data)
    backward(ad.tsum(y))
    np.testing.assert_array_equal(x.grad, np.ones((4, 6)))


def test_permute_reshape_roundtrip():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    y = ad.reshape(ad.permute(x, (2, 0, 1)), (4, 6))
    assert y.data.shape == (4, 6)
    backward(ad.tsum(ad.mul(y, y)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_dropout_eval_is_identity_train_scales():
    rng = np.random.default_rng(4)
    x = Tensor(np.ones((100, 10)), requires_grad=True)
    assert ad.dropout(x, 0.5, rng, training=False) is x
    y = ad.dropout(x, 0.5, rng, training=True)
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], 2.0)  # inverted scaling
    assert 0.3 < kept.mean() < 0.7


def test_determinism_same_seed_same_output():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
        y = ad.tsum(ad.relu(ad.matmul(x, x)))
        backward(y)
        return y.data.copy(), x.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(g1, g2)


def test_finite_forward_values_on_finite_input():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((8, 8)) * 50, requires_grad=True)
    for op in (ad.relu, ad.sigmoid, ad.tanh, ad.log_softmax, ad.softmax_rows):
        assert np.isfinite(op(x).data).all(), op.__name__
