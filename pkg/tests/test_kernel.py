import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stackforecast import kernel as K


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def weighted_sum(t: K.Tensor, seed: int = 1) -> K.Tensor:
    """Scalar loss with O(1) gradients everywhere: sum(t * R)."""
    r = np.random.default_rng(seed).normal(size=t.shape)
    return K.sum(K.mul(t, r))


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(K.matmul(a, b).value, naive_matmul(a, b), rtol=1e-12)


def test_matmul_batched_against_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 4, 3)), rng.normal(size=(3, 2))
    out = K.matmul(a, b).value
    for i in range(2):
        np.testing.assert_allclose(out[i], naive_matmul(a[i], b), rtol=1e-12)


def test_add_mul_backward_by_hand():
    x = K.parameter(np.array([2.0, -3.0]))
    y = K.parameter(np.array([4.0, 5.0]))
    loss = K.sum(K.add(K.mul(x, y), x))
    K.backward(loss)
    np.testing.assert_array_equal(x.grad, [5.0, 6.0])
    np.testing.assert_array_equal(y.grad, [2.0, -3.0])


def test_reused_node_accumulates():
    x = K.parameter(np.array([3.0]))
    loss = K.sum(K.mul(x, x))  # d/dx x^2 = 2x
    K.backward(loss)
    assert x.grad[0] == 6.0


def test_adjoints_reset_between_passes():
    x = K.parameter(np.array([1.5]))
    for _ in range(3):
        K.backward(K.sum(K.scale(x, 2.0)))
    assert x.grad[0] == 2.0


def test_broadcast_gradient_reduces_to_shape():
    w = K.parameter(np.ones((3,)))
    x = K.Tensor(np.arange(6.0).reshape(2, 3))
    K.backward(K.sum(K.add(x, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])


def test_backward_requires_scalar():
    x = K.parameter(np.ones(3))
    with pytest.raises(ValueError):
        K.backward(K.scale(x, 2.0))


def test_backward_requires_graph():
    with pytest.raises(RuntimeError):
        K.backward(K.sum(K.Tensor(np.ones(2))))


def test_non_finite_forward_raises():
    x = K.parameter(np.array([1.0, 0.0]))
    with pytest.raises(K.NonFiniteError):
        K.mul(x, np.array([np.inf, 1.0]))


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        K.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("op", [
    lambda a: K.sigmoid(a), lambda a: K.tanh(a), lambda a: K.elu(a), lambda a: K.softmax(a, axis=-1),
    lambda a: K.square(a), lambda a: K.transpose(a), lambda a: K.reshape(a, (-1,)),
    lambda a: K.mean(a, axis=0), lambda a: a[:, 1:], lambda a: a[np.array([0, 0, 1])],
    lambda a: K.concat([a, K.scale(a, 2.0)], axis=-1), lambda a: K.stack([a, a], axis=0),
])
def test_ops_pass_finite_difference(op):
    a = K.parameter(np.random.default_rng(3).normal(size=(2, 3)))
    err = K.grad_check(lambda: weighted_sum(op(a)), [a])
    assert err < 1e-6


def test_matmul_grad():
    rng = np.random.default_rng(4)
    a, b = K.parameter(rng.normal(size=(3, 4))), K.parameter(rng.normal(size=(4, 2)))
    assert K.grad_check(lambda: weighted_sum(K.matmul(a, b)), [a, b]) < 1e-6


def test_batched_matmul_grad():
    rng = np.random.default_rng(5)
    a, b = K.parameter(rng.normal(size=(2, 3, 4))), K.parameter(rng.normal(size=(2, 4, 3)))
    assert K.grad_check(lambda: weighted_sum(K.matmul(a, b)), [a, b]) < 1e-6


def test_dropout_identity_at_inference_and_scaled_in_training():
    x = K.Tensor(np.ones((4, 5)))
    assert K.dropout(x, None, 0.5) is x
    mask = K.dropout_mask(K.make_rng(0), (4, 5), 0.5)
    out = K.dropout(x, mask, 0.5).value
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_make_rng_reproducible():
    assert np.array_equal(K.make_rng(7).random(5), K.make_rng(7).random(5))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    s = K.softmax(x, axis=-1).value
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-40, 40)))
def test_sigmoid_bounded_and_symmetric(x):
    s = K.sigmoid(x).value
    assert ((s >= 0) & (s <= 1)).all()
    np.testing.assert_allclose(s + K.sigmoid(-x).value, 1.0, atol=1e-12)
