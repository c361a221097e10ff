"""Autodiff graph mechanics: backward contracts, fan-out accumulation."""

import numpy as np
import pytest

from octoforce import GraphError, Tensor
from octoforce.tensor import add, tsum, weighted_sum


def test_sum_backward_is_ones():
    x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), np.float32))


def test_sum_through_add_fans_out():
    # x used twice: gradients must accumulate to 2
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    tsum(add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2), np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        add(x, x).backward()


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_on_detached_tensor_is_an_error():
    t = Tensor(np.ones(1))
    with pytest.raises(GraphError):
        t.backward()


def test_no_recording_without_requires_grad():
    x = Tensor(np.ones((2, 2)))
    out = add(x, x)
    assert out._prev == () and out._backward is None and not out.requires_grad


def test_weighted_sum_gradient_is_the_weights():
    w = np.arange(6, dtype=np.float64).reshape(2, 3)
    x = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    weighted_sum(x, w).backward()
    np.testing.assert_array_equal(x.grad, w)


def test_grad_accumulates_across_separate_ops():
    x = Tensor(np.ones(4), requires_grad=True)
    a = tsum(x)
    b = weighted_sum(x, np.full(4, 3.0))
    add(a, b).backward()
    np.testing.assert_allclose(x.grad, np.full(4, 4.0), rtol=0)


def test_float32_default_and_float64_opt_in():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.ones(2, np.float64)).dtype == np.float64
    assert Tensor([1, 2], dtype=np.float64).dtype == np.float64
