"""Engine primitives: forward values, backward semantics, gradient checks."""

import numpy as np
import pytest

from sleepstager.autodiff import Tensor, concat, index_rows, no_grad, set_debug_checks
from sleepstager.autodiff.tensor import _unbroadcast

from helpers import check_gradients


def _t(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def test_backward_requires_scalar():
    x = _t([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_sum_of_params_gives_ones():
    x = _t(np.arange(12.0).reshape(3, 4))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_zero_times_graph_gives_zero_gradients():
    x = _t([1.0, -2.0, 3.0])
    loss = ((x * x).sum()) * 0.0
    loss.backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_gradients_accumulate_across_backward_calls():
    x = _t([2.0])
    x.sum().backward()
    x.sum().backward()
    assert np.array_equal(x.grad, [2.0])
    x.zero_grad()
    x.sum().backward()
    assert np.array_equal(x.grad, [1.0])


def test_broadcast_add_and_mul_gradients():
    rng = np.random.default_rng(0)
    a = _t(rng.normal(size=(3, 4)))
    b = _t(rng.normal(size=(4,)))
    c = _t(rng.normal(size=(3, 1)))
    check_gradients(lambda: ((a + b) * c).sum(), [a, b, c])


def test_div_pow_exp_log_gradients():
    rng = np.random.default_rng(1)
    a = _t(rng.uniform(0.5, 2.0, size=(2, 3)))
    b = _t(rng.uniform(0.5, 2.0, size=(2, 3)))
    check_gradients(lambda: ((a / b) ** 1.5).exp().log().sum(), [a, b])


def test_tanh_sigmoid_relu_gradients():
    rng = np.random.default_rng(2)
    a = _t(rng.normal(size=(4, 3)) + 0.1)
    check_gradients(lambda: (a.tanh() + a.sigmoid() + (a * 2.0).relu()).sum(), [a])


def test_matmul_gradients_and_shape_errors():
    rng = np.random.default_rng(3)
    a = _t(rng.normal(size=(3, 4)))
    b = _t(rng.normal(size=(4, 2)))
    check_gradients(lambda: (a @ b).sum(), [a, b])
    with pytest.raises(ValueError, match="inner dimensions"):
        _ = _t(np.ones((2, 3))) @ _t(np.ones((2, 3)))


def test_reductions_and_shape_op_gradients():
    rng = np.random.default_rng(4)
    a = _t(rng.normal(size=(2, 3, 4)))
    check_gradients(
        lambda: (a.sum(axis=(0, 2), keepdims=True) * a.mean(axis=1, keepdims=True)).sum(),
        [a])
    check_gradients(
        lambda: a.reshape(6, 4).transpose(1, 0).narrow(0, 1, 2).sum(), [a])


def test_concat_and_index_rows_gradients():
    rng = np.random.default_rng(5)
    a = _t(rng.normal(size=(2, 3)))
    b = _t(rng.normal(size=(4, 3)))
    idx = np.array([0, 2, 2, 5])  # repeated row exercises scatter-add
    check_gradients(lambda: (index_rows(concat([a, b], axis=0), idx) ** 2.0).sum(),
                    [a, b])


def test_relu_values():
    out = _t([-3.0, 0.0, 5.0]).relu()
    assert np.array_equal(out.data, [0.0, 0.0, 5.0])


def test_no_grad_blocks_graph_construction():
    x = _t([1.0, 2.0])
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.backward()


def test_debug_checks_catch_nonfinite():
    set_debug_checks(True)
    try:
        x = _t([1.0, 0.0])
        with pytest.raises(FloatingPointError, match="div"):
            _ = x / Tensor(np.array([1.0, 0.0]))
    finally:
        set_debug_checks(False)


def test_unbroadcast_restores_shapes():
    g = np.ones((5, 3, 4))
    assert _unbroadcast(g, (3, 4)).shape == (3, 4)
    assert _unbroadcast(g, (1, 4)).shape == (1, 4)
    assert np.array_equal(_unbroadcast(g, (3, 1)), np.full((3, 1), 20.0))


def test_determinism_same_ops_same_bits():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        y = ((x @ x.transpose(1, 0)).tanh().sum())
        y.backward()
        return x.grad.copy()
    assert np.array_equal(run(), run())
