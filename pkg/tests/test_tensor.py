import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deepminer import tensor as T
from deepminer.errors import (
    AxisOutOfRange,
    BroadcastError,
    DomainError,
    EmptyTape,
    InvalidHyperparam,
    InvalidPermutation,
    NonFiniteInput,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)
from deepminer.tensor import Tensor, grad_check, no_grad

from conftest import check_grads, leaf

SHAPES = [(), (1,), (3,), (1, 3), (2, 1), (2, 3), (3, 2), (4, 1, 3), (4, 2, 3), (1, 2, 1)]


def _compatible(a, b):
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_broadcasting_exhaustive(kind):
    ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[kind]
    rng = np.random.default_rng(1)
    for sa, sb in itertools.product(SHAPES, SHAPES):
        a = rng.uniform(0.5, 2.0, size=sa)
        b = rng.uniform(0.5, 2.0, size=sb)
        if not _compatible(sa, sb):
            with pytest.raises(BroadcastError):
                T.ewise_binary(kind, a, b)
            continue
        ta, tb = leaf(a), leaf(b)
        out = T.ewise_binary(kind, ta, tb)
        np.testing.assert_array_equal(out.data, ref(a, b))
        weights = rng.normal(size=out.shape)
        (out * weights).sum().backward()
        assert ta.grad.shape == sa and tb.grad.shape == sb
        # oracle: d/da sum(w * op(a, b)) reduced over broadcast axes
        ab, bb = np.broadcast_arrays(a, b)
        da = {"add": 1.0, "sub": 1.0, "mul": bb, "div": 1.0 / bb}[kind] * weights
        db = {"add": 1.0, "sub": -1.0, "mul": ab, "div": -ab / bb**2}[kind] * weights
        np.testing.assert_allclose(ta.grad, _reduce_to(da, sa), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(tb.grad, _reduce_to(db, sb), rtol=1e-12, atol=1e-12)


def _reduce_to(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@pytest.mark.parametrize("kind", ["relu", "softplus", "exp", "log", "sqrt", "neg"])
def test_unary_grad_check(kind):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.3, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    if kind in ("log", "sqrt"):
        x = np.abs(x)
    err = grad_check(lambda t: (T.ewise_unary(kind, t) * np.arange(12.0).reshape(3, 4)).sum(), x)
    assert err <= 1e-6


def test_unary_values():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    np.testing.assert_array_equal(T.relu(x).data, np.maximum(x, 0))
    np.testing.assert_allclose(T.softplus(x).data, np.log1p(np.exp(x)), rtol=1e-15)
    assert T.softplus(np.array([800.0])).data[0] == 800.0
    assert T.softplus(np.array([-800.0])).data[0] >= 0.0


@pytest.mark.parametrize("kind,value", [("log", 0.0), ("log", -1.0), ("sqrt", -1e-3)])
def test_domain_errors(kind, value):
    with pytest.raises(DomainError):
        T.ewise_unary(kind, np.array([1.0, value]))


def test_unknown_op_kinds():
    with pytest.raises(InvalidHyperparam):
        T.ewise_unary("tanh", np.ones(2))
    with pytest.raises(InvalidHyperparam):
        T.ewise_binary("pow", np.ones(2), np.ones(2))
    with pytest.raises(InvalidHyperparam):
        T.reduce("prod", np.ones(2))


def test_non_finite_is_rejected():
    with pytest.raises(NonFiniteInput):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteInput):
        T.exp(np.array([1000.0]))
    with pytest.raises(DomainError):
        T.div(np.ones(2), np.zeros(2))


def test_tensor_new():
    t = T.tensor_new((2, 3), range(6), requires_grad=True)
    np.testing.assert_array_equal(t.data, np.arange(6.0).reshape(2, 3))
    assert t.requires_grad
    with pytest.raises(ShapeMismatch):
        T.tensor_new((2, 3), range(5))
    with pytest.raises(ShapeMismatch):
        T.tensor_new((0, 3), [])


def test_backward_contract():
    x = leaf([1.0, 2.0])
    y = (x * x).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    with pytest.raises(TapeConsumed):
        y.backward()
    with pytest.raises(NonScalarLoss):
        (x * 2.0).backward()
    with pytest.raises(EmptyTape):
        Tensor([1.0]).sum().backward()


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == 2 * 3.0 + 3 * 9.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf
    assert T.is_grad_enabled()


def test_matmul_batched_and_errors():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(T.matmul(a, b).data, a @ b, rtol=1e-14)
    assert grad_check(lambda t: T.matmul(t, b).sum(), a) <= 1e-6
    with pytest.raises(ShapeMismatch):
        T.matmul(a, rng.normal(size=(2, 3, 5)))
    with pytest.raises(ShapeMismatch):
        T.matmul(a, rng.normal(size=(3, 4, 5)))
    with pytest.raises(ShapeMismatch):
        T.matmul(np.ones(3), np.ones((3, 1)))


def conv2d_loops(x, k, stride, padding):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(co), range(ho), range(wo)):
        patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
        out[b, o, i, j] = sum(patch[ci, u, v] * k[o, ci, u, v]
                              for ci in range(c) for u in range(kh) for v in range(kw))
    return out


@pytest.mark.parametrize("ksize,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (2, 1, 0), (3, 1, 0)])
def test_conv2d_matches_loops_and_grads(ksize, stride, padding):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 5, 4))
    k = rng.normal(size=(2, 3, ksize, ksize))
    out = T.conv2d(x, k, stride, padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, stride, padding), rtol=1e-12, atol=1e-12)
    tx, tk = leaf(x), leaf(k)
    w = rng.normal(size=out.shape)
    err = check_grads(lambda: (T.conv2d(tx, tk, stride, padding) * w).sum(), [tx, tk])
    assert err <= 1e-6


def test_conv2d_errors():
    with pytest.raises(ShapeMismatch):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(InvalidHyperparam):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)
    with pytest.raises(ShapeMismatch):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("axis", [None, 0, 1, (0, 2), -1])
@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
def test_reductions(kind, axis):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 2))
    ref = {"sum": np.sum, "mean": np.mean, "max": np.max}[kind](x, axis=axis)
    np.testing.assert_allclose(T.reduce(kind, x, axis).data, ref, rtol=1e-14)
    assert T.reduce(kind, x, axis, keepdims=True).data.ndim == 3
    assert grad_check(lambda t: (T.reduce(kind, t, axis) * 1.5).sum(), x) <= 1e-6


def test_max_gradient_goes_to_first_maximum():
    x = leaf([[1.0, 5.0, 5.0], [2.0, 2.0, 0.0]])
    T.amax(x, axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])
    y = leaf(np.full((2, 2), 7.0))
    T.amax(y).backward()
    np.testing.assert_array_equal(y.grad, [[1, 0], [0, 0]])


def test_axis_errors():
    with pytest.raises(AxisOutOfRange):
        T.sum(np.ones((2, 2)), axis=2)
    with pytest.raises(AxisOutOfRange):
        T.sum(np.ones((2, 2)), axis=(0, 0))


def test_softmax_and_log_softmax():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 5)) * 4
    s = T.softmax(x, axis=1).data
    ref = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(s, ref, rtol=1e-13)
    np.testing.assert_allclose(T.log_softmax(x, axis=1).data, np.log(ref), rtol=1e-12)
    w = rng.normal(size=x.shape)
    assert grad_check(lambda t: (T.softmax(t, axis=0) * w).sum(), x) <= 1e-6
    assert grad_check(lambda t: (T.log_softmax(t, axis=1) * w).sum(), x) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-300, 300)))
def test_softmax_properties(x):
    s = T.softmax(x, axis=-1).data
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(T.softmax(x + 7.0, axis=-1).data, s, rtol=1e-9, atol=1e-300)


def test_reshape_transpose_concat_getitem():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 3, 2))
    assert grad_check(lambda t: (t.transpose(2, 1, 0) * w).sum(), x) <= 1e-6
    assert grad_check(lambda t: (t.reshape(4, -1) * w.reshape(4, 6)).sum(), x) <= 1e-6
    wc = rng.normal(size=(2, 6, 4))
    assert grad_check(lambda t: (T.concat([t, t * 2.0], axis=1) * wc).sum(), x) <= 1e-6
    rows = np.array([0, 1, 1])
    cols = np.array([2, 0, 2])
    assert grad_check(lambda t: t[rows, cols].sum() + t[0, 1:].sum(), x) <= 1e-6
    with pytest.raises(InvalidPermutation):
        T.transpose(x, (0, 0, 1))
    with pytest.raises(ShapeMismatch):
        T.reshape(x, (5, 5))
    with pytest.raises(ShapeMismatch):
        T.concat([x, np.ones((2, 3, 3))], axis=0)


def test_grad_check_flags_wrong_gradient():
    def wrong(t):
        # forward x^2 but backward claims 3x^2
        out = T._result(t.data ** 2, (t,), lambda g: (3 * g * t.data ** 2,), "bad")
        return out.sum()

    assert grad_check(wrong, np.array([1.0, 2.0])) > 0.1
    with pytest.raises(InvalidHyperparam):
        grad_check(lambda t: t.sum(), np.ones(2), eps=0.0)
