import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pseudocoreset import diffcore as dc
from conftest import central_diff, rel_err


def fd_rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def test_matmul_identity():
    out = dc.matmul(dc.const([[1.0, 2.0], [3.0, 4.0]]), dc.const(np.eye(2)))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_logsumexp_two_zeros():
    assert dc.logsumexp(dc.const([0.0, 0.0])).value == pytest.approx(np.log(2), abs=1e-15)


def test_relu_sum():
    assert dc.sum_(dc.relu(dc.const([-1.0, 2.0, 3.0]))).value == 5.0


def test_quadratic_grad():
    _, g = dc.grad(lambda x: dc.dot(x, x), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_stop_grad_blocks_one_path():
    _, g = dc.grad(lambda x: dc.sum_(dc.mul(dc.stop_grad(x), x)), np.array([3.0]))
    np.testing.assert_array_equal(g, [3.0])


def test_shared_subexpression_accumulates():
    # y = x*x used twice: d/dx (y + y) = 4x
    def f(x):
        y = dc.mul(x, x)
        return dc.sum_(dc.add(y, y))

    _, g = dc.grad(f, np.array([1.5, -2.0]))
    np.testing.assert_allclose(g, [6.0, -8.0])


def test_non_scalar_root_rejected():
    with pytest.raises(dc.ContractError):
        dc.backward(dc.leaf([1.0, 2.0]))


def test_trailing_broadcast_rejected():
    with pytest.raises(dc.DimensionError):
        dc.add(dc.const(np.ones((3, 2))), dc.const(np.ones(3)))


def test_unreached_leaf_gets_zeros():
    a, b = dc.leaf([1.0, 2.0]), dc.leaf([5.0])
    g = dc.backward(dc.sum_(a), wrt=[a, b])
    np.testing.assert_array_equal(g[b], [0.0])


def test_leading_broadcast_gradient():
    x = np.arange(6.0).reshape(3, 2)
    _, gx, gb = dc.grad(lambda a, b: dc.sum_(dc.mul(dc.add(a, b), a)), x, np.array([0.5, -1.0]))
    np.testing.assert_allclose(gb, x.sum(axis=0))
    np.testing.assert_allclose(gx, 2 * x + np.array([0.5, -1.0]))


# Each entry: (name, builder from leaves to scalar, input shapes, positive-only inputs)
OPS = [
    ("add", lambda a, b: dc.sum_(dc.mul(dc.add(a, b), a)), [(3, 2), (2,)], False),
    ("sub", lambda a, b: dc.sum_(dc.mul(dc.sub(a, b), b)), [(4,), (4,)], False),
    ("mul", lambda a, b: dc.sum_(dc.mul(a, b)), [(2, 3), (3,)], False),
    ("div", lambda a, b: dc.sum_(dc.div(a, b)), [(3,), (3,)], True),
    ("neg", lambda a: dc.sum_(dc.mul(dc.neg(a), a)), [(3,)], False),
    ("relu", lambda a: dc.sum_(dc.mul(dc.relu(a), a)), [(5,)], False),
    ("tanh", lambda a: dc.sum_(dc.tanh(a)), [(2, 2)], False),
    ("exp", lambda a: dc.sum_(dc.exp(a)), [(3,)], False),
    ("log", lambda a: dc.sum_(dc.log(a)), [(3,)], True),
    ("sqrt", lambda a: dc.sum_(dc.sqrt(a)), [(3,)], True),
    ("matmul_mm", lambda a, b: dc.sum_(dc.tanh(dc.matmul(a, b))), [(2, 3), (3, 4)], False),
    ("matmul_mv", lambda a, b: dc.sum_(dc.tanh(dc.matmul(a, b))), [(2, 3), (3,)], False),
    ("matmul_vm", lambda a, b: dc.sum_(dc.tanh(dc.matmul(a, b))), [(3,), (3, 2)], False),
    ("transpose", lambda a: dc.sum_(dc.mul(dc.transpose(a), dc.const(np.arange(6.0).reshape(3, 2)))), [(2, 3)], False),
    ("reshape", lambda a: dc.l2sq(dc.mul(dc.reshape(a, (6,)), dc.const(np.arange(6.0)))), [(2, 3)], False),
    ("expand_last", lambda a: dc.l2sq(dc.mul(dc.expand_last(a, 3), dc.const(np.arange(6.0).reshape(2, 3)))), [(2,)], False),
    ("slice", lambda a: dc.l2sq(dc.slice_(a, 1, 4)), [(5,)], False),
    ("concat", lambda a, b: dc.dot(dc.concat([a, b]), dc.const(np.arange(5.0))), [(2,), (3,)], False),
    ("gather", lambda a: dc.l2sq(dc.gather(a, [0, 2, 2])), [(3, 2)], False),
    ("sum_axis", lambda a: dc.l2sq(dc.sum_(a, axis=0)), [(3, 2)], False),
    ("mean", lambda a: dc.l2sq(dc.mean(a, axis=1)), [(3, 2)], False),
    ("logsumexp", lambda a: dc.sum_(dc.logsumexp(a)), [(3, 4)], False),
    ("log_softmax", lambda a: dc.sum_(dc.mul(dc.log_softmax(a), dc.const(np.arange(8.0).reshape(2, 4)))), [(2, 4)], False),
    ("l2sq", lambda a: dc.l2sq(a), [(3, 2)], False),
    ("dot", lambda a, b: dc.dot(a, b), [(4,), (4,)], False),
]


@pytest.mark.parametrize("name,fn,shapes,positive", OPS, ids=[o[0] for o in OPS])
def test_op_matches_finite_differences(name, fn, shapes, positive):
    rng = np.random.default_rng(7)
    vals = [rng.uniform(0.2, 2.0, s) if positive else rng.uniform(-2, 2, s) for s in shapes]
    if name == "relu":  # keep away from the kink
        vals[0] = np.where(np.abs(vals[0]) < 0.1, 0.5, vals[0])
    _, *grads = dc.grad(fn, *vals)
    for i, v in enumerate(vals):
        def scalar(z, i=i):
            args = [dc.const(w) for w in vals]
            args[i] = dc.const(z)
            return float(fn(*args).value)

        assert fd_rel(grads[i], central_diff(scalar, v)) < 1e-5, name


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-2, 2)), arrays(np.float64, (2,), elements=st.floats(-2, 2)))
def test_composite_matches_finite_differences(a, b):
    # Unequal class weights keep the true gradient away from zero: an unweighted
    # sum of log_softmax has an exactly zero gradient at equal logits, where the
    # relative error would compare round-off with round-off. tanh bounds the logit
    # gap by 2, so softmax can never reach the 1:10 ratio that would cancel it.
    w = dc.const(np.array([1.0, 10.0]))

    def fn(x, y):
        return dc.sum_(dc.mul(dc.log_softmax(dc.tanh(dc.add(x, y))), w))

    _, ga, gb = dc.grad(fn, a, b)
    fa = central_diff(lambda z: float(fn(dc.const(z), dc.const(b)).value), a)
    fb = central_diff(lambda z: float(fn(dc.const(a), dc.const(z)).value), b)
    assert rel_err(ga, fa) < 1e-5
    assert rel_err(gb, fb) < 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-2, 2)))
def test_stop_grad_gradient_is_zero(x):
    _, g = dc.grad(lambda v: dc.sum_(dc.exp(dc.stop_grad(v))), x)
    assert np.all(g == 0.0)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_backward_deterministic(x):
    fn = lambda v: dc.sum_(dc.logsumexp(dc.mul(v, v)))  # noqa: E731
    assert all(np.array_equal(p, q) for p, q in zip(dc.grad(fn, x)[1:], dc.grad(fn, x)[1:]))


def test_values_are_read_only():
    n = dc.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        n.value[0] = 3.0
