import logging

import numpy as np
import pytest

from helpers import grad_check
from tripletvol import tensor as T
from tripletvol.errors import ContractError, GradientError, OracleError, ShapeError
from tripletvol.tensor import Tensor, backward, finite_diff_gradient, l2_normalize_rows, no_grad


def test_sum_gradient_is_ones():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    g = backward(x.sum())
    np.testing.assert_array_equal(g[x], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_half_square_gradient_is_identity():
    x = Tensor([2.0, -3.0], requires_grad=True)
    g = backward(0.5 * (x * x).sum())
    np.testing.assert_allclose(g[x], [2.0, -3.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_on_detached_graph():
    x = Tensor(np.ones(3))
    with pytest.raises(GradientError):
        backward(x.sum())


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_fan_out_accumulates():
    x = Tensor([1.5, -0.5], requires_grad=True)
    y = x * x + x * 3.0  # x used three times
    g = backward(y.sum())
    np.testing.assert_allclose(g[x], 2 * x.data + 3.0)


def test_leaf_grads_overwritten_between_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 5.0).sum())
    np.testing.assert_allclose(x.grad, [5.0, 5.0])


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=5), requires_grad=True)

    def f(t):
        return (T.exp(t) * t).sum()

    def g(t):
        return (t * t * t).sum()

    gf = backward(f(x))[x].copy()
    gg = backward(g(x))[x].copy()
    combo = backward(2.5 * f(x) - 0.75 * g(x))[x]
    np.testing.assert_allclose(combo, 2.5 * gf - 0.75 * gg, rtol=1e-12)


def test_finite_diff_of_sum_is_ones():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(finite_diff_gradient(lambda t: t.sum(), x, h=1e-3), np.ones((3, 4)), atol=1e-9)


def test_finite_diff_of_square():
    g = finite_diff_gradient(lambda t: (t * t).sum(), np.array([3.0]), h=1e-3)
    np.testing.assert_allclose(g, [6.0], atol=1e-5)


def test_finite_diff_non_finite_raises():
    with pytest.raises(OracleError), np.errstate(all="ignore"):
        finite_diff_gradient(lambda t: T.log(t).sum(), np.array([0.0]), h=1e-3)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_gradient(lambda t: t.sum(), np.array([1.0]), h=0.0)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: T.maximum(a, b),
        lambda a, b: T.minimum(a, b),
    ],
    ids=["add", "sub", "mul", "div", "maximum", "minimum"],
)
def test_binary_op_gradients(fn):
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert grad_check(fn, [a, b], rng) < 1e-6


def test_broadcast_gradient_reduces_to_input_shape():
    rng = np.random.default_rng(3)
    assert grad_check(lambda a, b: a * b + b, [rng.normal(size=(4, 3)), rng.normal(size=(1, 3))], rng) < 1e-6
    assert grad_check(lambda a, b: a - b, [rng.normal(size=(2, 4, 3)), rng.normal(size=3)], rng) < 1e-6


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.exp(x),
        lambda x: T.log(x * x + 1.0),
        lambda x: T.sqrt(x * x + 0.5),
        lambda x: T.power(x * x + 1.0, 1.5),
        lambda x: T.relu(x),
        lambda x: T.clip(x, -0.5, 0.5),
        lambda x: x.reshape(6, 2),
        lambda x: T.flatten(x.reshape(2, 2, 3)),
        lambda x: x[1:, ::2],
        lambda x: T.take(x, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
        lambda x: x.sum(axis=0),
        lambda x: x.mean(axis=1, keepdims=True),
        lambda x: x @ x.reshape(4, 3),
    ],
    ids=["exp", "log", "sqrt", "pow", "relu", "clip", "reshape", "flatten", "slice", "take", "sum", "mean", "matmul"],
)
def test_unary_op_gradients(fn):
    rng = np.random.default_rng(4)
    for _ in range(5):
        assert grad_check(fn, [rng.normal(size=(3, 4))], rng) < 1e-6


def test_l2_normalize_examples():
    out = l2_normalize_rows(Tensor([[3.0, 4.0], [1.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.6, 0.8], [1.0, 0.0]])
    np.testing.assert_array_equal(l2_normalize_rows(Tensor([[1.0, 0.0, 0.0]])).data, [[1.0, 0.0, 0.0]])


def test_l2_normalize_zero_row_passes_through(caplog):
    with caplog.at_level(logging.WARNING):
        out = l2_normalize_rows(Tensor([[0.0, 0.0], [0.0, 2.0]])).data
    np.testing.assert_array_equal(out, [[0.0, 0.0], [0.0, 1.0]])
    assert "degenerate" in caplog.text


def test_l2_normalize_unit_norms_and_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(np.linalg.norm(l2_normalize_rows(Tensor(x)).data, axis=1), 1.0, atol=1e-6)
    assert grad_check(l2_normalize_rows, [x], rng) < 1e-6


def test_l2_normalize_rejects_bad_rank():
    with pytest.raises(ShapeError):
        l2_normalize_rows(Tensor(np.ones(3)))


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    np.testing.assert_array_equal(backward(y.sum())[x], [1.0, 1.0])
