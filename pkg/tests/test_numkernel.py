import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2w2c import numkernel as nk
from c2w2c.numkernel import Tensor
from oracles import central_difference, relative_error


def T(x, grad=True):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


def numeric_grad(fn, arr, eps=1e-5):
    f = lambda: float(fn().item())  # noqa: E731
    with nk.no_grad():
        return np.array([central_difference(f, arr, i, eps) for i in range(arr.size)]).reshape(arr.shape)


def assert_grads(fn, inputs, tol=1e-6):
    out = fn()
    out.backward()
    for x in inputs:
        num = numeric_grad(fn, x.data)
        assert relative_error(x.grad, num) < tol


# -- matmul --------------------------------------------------------------------------


def test_matmul_examples():
    assert np.array_equal(nk.matmul(T([[1, 0], [0, 1]]), T([[3], [4]])).data, [[3], [4]])
    assert nk.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = T(rng.normal(size=(5, 4))), T(rng.normal(size=(4, 3)))
    assert_grads(lambda: nk.total(nk.matmul(a, b)), [a, b])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nk.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# -- elementwise ---------------------------------------------------------------------


def test_elementwise_values():
    assert nk.elementwise("tanh", T([0.0])).data[0] == 0.0
    assert nk.elementwise("sigmoid", T([0.0])).data[0] == 0.5
    assert nk.elementwise("scale", T([1.0, -2.0]), 3.0).data.tolist() == [3.0, -6.0]


def test_tanh_derivative_at_point():
    x = T([0.3])
    nk.total(nk.tanh(x)).backward()
    num = numeric_grad(lambda: nk.total(nk.tanh(x)), x.data)[0]
    assert x.grad[0] == pytest.approx(num, rel=1e-8)
    assert x.grad[0] == pytest.approx(0.91513, abs=1e-5)


def test_sigmoid_is_stable_for_large_inputs():
    out = nk.sigmoid(T([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out.tolist() == [0.0, 1.0]


def test_elementwise_shape_mismatch():
    with pytest.raises(nk.DimensionError):
        nk.add(T(np.ones((2, 2))), T(np.ones((2, 3))))
    with pytest.raises(nk.DimensionError):
        nk.mul(T(np.ones(3)), T(np.ones(2)))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        nk.elementwise("cube", T([1.0]))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh", "sigmoid", "scale", "pairwise_max", "softmax", "bias"])
def test_gradients_on_random_shapes(op, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
    a, b = T(rng.normal(size=shape)), T(rng.normal(size=shape))
    w = T(rng.normal(size=shape), grad=False)  # random weighting so the sum is not symmetric
    fns = {
        "add": (lambda: nk.add(a, b), [a, b]),
        "sub": (lambda: nk.sub(a, b), [a, b]),
        "mul": (lambda: nk.mul(a, b), [a, b]),
        "tanh": (lambda: nk.tanh(a), [a]),
        "sigmoid": (lambda: nk.sigmoid(a), [a]),
        "scale": (lambda: nk.scale(a, -1.7), [a]),
        "pairwise_max": (lambda: nk.pairwise_max(a, b), [a, b]),
        "softmax": (lambda: nk.softmax(a), [a]),
        "bias": (lambda: nk.add_bias(a, bb), [a]),
    }
    bb = T(rng.normal(size=shape[1:]))
    fn, inputs = fns[op]
    if op == "bias":
        inputs = [a, bb]
    assert_grads(lambda: nk.total(nk.mul(fn(), w)), inputs, tol=1e-4)


# -- softmax -------------------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(nk.softmax(T([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = nk.softmax(T([1000.0, 1000.0])).data
    assert big.tolist() == [0.5, 0.5]


def test_softmax_against_high_precision():
    mpmath.mp.dps = 40
    exps = [mpmath.e**k for k in (1, 2, 3)]
    expected = [float(e / sum(exps)) for e in exps]
    got = nk.softmax(T([1.0, 2.0, 3.0])).data
    assert np.allclose(got, expected, rtol=0, atol=1e-15)
    assert np.allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        nk.softmax(T(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(xs, shift):
    x = np.array(xs)
    p = nk.softmax(T(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)
    assert np.allclose(nk.softmax(T(x + shift)).data, p, rtol=0, atol=1e-10)


# -- pairwise max ----------------------------------------------------------------------


def test_pairwise_max_values_and_tie_rule():
    a, b = T([1.0, -2.0]), T([0.0, 3.0])
    assert nk.pairwise_max(a, b).data.tolist() == [1.0, 3.0]
    x, y = T([0.5, 0.5]), T([0.5, 0.5])
    out = nk.pairwise_max(x, y)
    assert out.data.tolist() == [0.5, 0.5]
    nk.total(out).backward()
    assert x.grad.tolist() == [1.0, 1.0]
    assert y.grad.tolist() == [0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_pairwise_max_commutes_in_value(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    assert np.array_equal(nk.pairwise_max(T(a), T(b)).data, nk.pairwise_max(T(b), T(a)).data)


def test_pairwise_max_shape_mismatch():
    with pytest.raises(nk.DimensionError):
        nk.pairwise_max(T(np.ones(2)), T(np.ones(3)))


# -- lookup ------------------------------------------------------------------------------


def test_lookup_identity_row():
    assert nk.lookup(T(np.eye(3)), 1).data.tolist() == [0.0, 1.0, 0.0]


def test_lookup_gradient_rows(rng):
    table = T(rng.normal(size=(5, 3)))
    nk.total(nk.lookup(table, 2)).backward()
    expected = np.zeros((5, 3))
    expected[2] = 1.0
    assert np.array_equal(table.grad, expected)


def test_lookup_same_row_twice_accumulates(rng):
    table = T(rng.normal(size=(4, 2)))
    out = nk.add(nk.lookup(table, 1), nk.scale(nk.lookup(table, 1), 2.0))
    nk.total(out).backward()
    assert table.grad[1].tolist() == [3.0, 3.0]
    assert np.all(table.grad[[0, 2, 3]] == 0)


def test_lookup_batch_of_indices(rng):
    table = T(rng.normal(size=(4, 2)))
    out = nk.lookup(table, np.array([3, 1, 3]))
    assert out.shape == (3, 2)
    nk.total(out).backward()
    assert table.grad[3].tolist() == [2.0, 2.0]
    assert table.grad[0].tolist() == [0.0, 0.0]


@pytest.mark.parametrize("index", [-1, 4, 10])
def test_lookup_out_of_range(index):
    with pytest.raises(IndexError):
        nk.lookup(T(np.zeros((4, 2))), index)


# -- cross entropy ---------------------------------------------------------------------------


def test_cross_entropy_values():
    assert nk.cross_entropy(T([1.0, 0.0, 0.0]), 0).item() == 0.0
    assert nk.cross_entropy(T([0.25] * 4), 3).item() == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.38629, abs=1e-5)


def test_cross_entropy_target_range():
    with pytest.raises(IndexError):
        nk.cross_entropy(T([0.5, 0.5]), 2)
    with pytest.raises(IndexError):
        nk.softmax_cross_entropy(T([[0.0, 0.0]]), [5])


def test_fused_softmax_cross_entropy_gradient(rng):
    logits = T(rng.normal(size=(1, 6)))
    nk.softmax_cross_entropy(logits, [4]).backward()
    p = nk.softmax(T(logits.data, grad=False)).data[0]
    expected = p - np.eye(6)[4]
    assert np.allclose(logits.grad[0], expected, atol=1e-14)
    num = numeric_grad(lambda: nk.softmax_cross_entropy(logits, [4]), logits.data)
    assert relative_error(logits.grad, num) < 1e-8


def test_fused_matches_composed(rng):
    x = rng.normal(size=(3, 5))
    fused = nk.softmax_cross_entropy(T(x), [0, 2, 4]).item()
    composed = sum(nk.cross_entropy(nk.softmax(T(x[i])), t).item() for i, t in enumerate([0, 2, 4]))
    assert fused == pytest.approx(composed, rel=1e-12)


def test_fused_is_finite_for_extreme_logits():
    out = nk.softmax_cross_entropy(T([[1000.0, -1000.0]]), [1]).item()
    assert out == pytest.approx(2000.0)


# -- graph mechanics -------------------------------------------------------------------------


def test_backward_twice_is_an_error(rng):
    a = T(rng.normal(size=(2, 2)))
    loss = nk.total(nk.tanh(a))
    loss.backward()
    with pytest.raises(nk.BackwardError):
        loss.backward()


def test_every_reachable_leaf_gets_gradient_of_same_shape(rng):
    a, b, c = T(rng.normal(size=(2, 3))), T(rng.normal(size=(3, 4))), T(rng.normal(size=(4,)))
    loss = nk.total(nk.sigmoid(nk.add_bias(nk.matmul(a, b), c)))
    loss.backward()
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape


def test_no_grad_records_nothing(rng):
    a = T(rng.normal(size=(2, 2)))
    with nk.no_grad():
        out = nk.tanh(a)
    assert not out.requires_grad
    assert nk.grad_enabled()


def test_detach_cuts_history(rng):
    a = T(rng.normal(size=(2,)))
    d = nk.tanh(a).detach()
    nk.total(nk.mul(d, d)).backward()
    assert a.grad is None


def test_float32_path_keeps_dtype(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype="float32")
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype="float32")
    out = nk.softmax(nk.matmul(a, b))
    assert out.dtype == np.float32
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
    nk.total(nk.mul(out, out)).backward()
    assert a.grad.dtype == np.float32


def test_shape_product_equals_data_length():
    t = Tensor([[1.0, 2.0]])
    assert t.shape == (1, 2) and int(np.prod(t.shape)) == t.data.size
