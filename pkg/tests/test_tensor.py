import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinelora import tensor as T
from cinelora.tensor import Tensor

from conftest import numeric_grad, rel_err


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _check(loss_fn, leaves, tol=1e-6):
    loss = loss_fn()
    loss.backward()
    for leaf in leaves:
        num = numeric_grad(lambda: loss_fn().item(), leaf.data)
        assert rel_err(leaf.grad, num) < tol


@pytest.mark.parametrize("op", ["add", "mul", "square", "gelu", "matmul", "softmax", "layer_norm", "linear",
                                "transpose", "getitem", "concat", "take", "mean", "mse"])
def test_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    w = rng.standard_normal((2, 3, 4))
    _row = _leaf(rng, 4)
    _sq = _leaf(rng, 4, 4)
    _g, _b = _leaf(rng, 4), _leaf(rng, 4)
    cases = {
        "add": (lambda: T.tsum(T.mul(T.add(a, _row), w[0])), [a, _row]),
        "mul": (lambda: T.tsum(T.mul(a, b)), [a, b]),
        "square": (lambda: T.tsum(T.mul(T.square(a), w[0])), [a]),
        "gelu": (lambda: T.tsum(T.mul(T.gelu(a), w[0])), [a]),
        "matmul": (lambda: T.tsum(T.mul(T.matmul(a, _sq), w[0])), [a, _sq]),
        "softmax": (lambda: T.tsum(T.mul(T.softmax(a, -1), w[0])), [a]),
        "layer_norm": (lambda: T.tsum(T.mul(T.layer_norm(a, _g, _b), w[0])), [a, _g, _b]),
        "linear": (lambda: T.tsum(T.mul(T.linear(a, _sq, _b), w[0])), [a, _sq, _b]),
        "transpose": (lambda: T.tsum(T.mul(T.transpose(a, (1, 0)), w[0].T)), [a]),
        "getitem": (lambda: T.tsum(T.mul(a[1:, ::2], w[0][1:, ::2])), [a]),
        "concat": (lambda: T.tsum(T.mul(T.concat([a, b], 0), np.concatenate([w[0], w[1]]))), [a, b]),
        "take": (lambda: T.tsum(T.mul(T.take(a, np.array([0, 2, 2])), w[0][:3])), [a]),
        "mean": (lambda: T.mean(T.mul(a, a), axis=1).sum(), [a]),
        "mse": (lambda: T.mse(a, b), [a, b]),
    }
    fn, leaves = cases[op]
    _check(fn, leaves)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(3, 4), (1, 4), (4,), (3, 1), ()]), st.integers(0, 2**16))
def test_broadcast_add_gradient_reduces_to_operand_shape(shape, seed):
    rng = np.random.default_rng(seed)
    a = _leaf(rng, 3, 4)
    b = Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
    T.tsum(T.add(a, b)).backward()
    assert b.grad.shape == b.shape
    # each element of b is broadcast to 12 / b.size positions of a
    assert np.allclose(b.grad, np.full(shape, 12.0 / b.size))


def test_grad_accumulates_only_on_leaves():
    a = Tensor(np.ones(3), requires_grad=True)
    mid = a * 2.0
    T.tsum(mid).backward()
    assert mid.grad is None
    assert np.array_equal(a.grad, np.full(3, 2.0, np.float32))
    T.tsum(a * 3.0).backward()
    assert np.array_equal(a.grad, np.full(3, 5.0, np.float32))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = a * 2.0
    assert not y.requires_grad and y.is_leaf


def test_backward_needs_scalar_or_seed():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()
    (a * 2.0).backward(np.ones(3, np.float32))
    assert np.array_equal(a.grad, np.full(3, 2.0, np.float32))


def test_shared_subexpression_gradients_sum():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    y = a * a
    T.tsum(y + y).backward()
    assert np.allclose(a.grad, 4 * a.data)


def test_default_dtype_is_single_precision():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.ones(2, np.float64)).dtype == np.float64
