"""Adam update rule against hand-computed cases."""

import numpy as np
import pytest

from octoforce import AdamState, Tensor, adam_step, zero_grads


def make_param(values):
    t = Tensor(np.asarray(values, np.float32), requires_grad=True)
    return t


def test_zero_gradient_never_moves_parameters():
    p = make_param([1.0, -2.0, 3.0])
    params = {"p": p}
    state = AdamState.create(params)
    for _ in range(25):
        p.grad = np.zeros(3, np.float32)
        adam_step(params, state, lr=0.1)
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0, 3.0], np.float32))


def test_missing_grad_counts_as_zero():
    p = make_param([4.0])
    params = {"p": p}
    state = AdamState.create(params)
    adam_step(params, state, lr=0.1)
    np.testing.assert_array_equal(p.data, np.array([4.0], np.float32))


def test_first_step_bias_corrected_update():
    # g=1 on a single scalar: m_hat = v_hat = 1, so the step is -lr/(1+eps)
    p = make_param([0.0])
    params = {"p": p}
    state = AdamState.create(params)
    p.grad = np.ones(1, np.float32)
    adam_step(params, state, lr=1e-4, eps=1e-12)
    assert p.data[0] == pytest.approx(-1e-4, rel=1e-5)
    assert state.t == 1


def test_joint_equals_separate_updates(rng):
    a0, b0 = 1.5, -0.5
    joint = make_param([a0, b0])
    sep_a, sep_b = make_param([a0]), make_param([b0])
    js = AdamState.create({"j": joint})
    sa = AdamState.create({"a": sep_a})
    sb = AdamState.create({"b": sep_b})
    for _ in range(10):
        ga, gb = rng.standard_normal(2).astype(np.float32)
        joint.grad = np.array([ga, gb], np.float32)
        sep_a.grad = np.array([ga], np.float32)
        sep_b.grad = np.array([gb], np.float32)
        adam_step({"j": joint}, js, lr=1e-2)
        adam_step({"a": sep_a}, sa, lr=1e-2)
        adam_step({"b": sep_b}, sb, lr=1e-2)
    np.testing.assert_array_equal(joint.data, np.array([sep_a.data[0], sep_b.data[0]]))


def test_zero_grads_clears_buffers():
    p = make_param([1.0])
    p.grad = np.ones(1, np.float32)
    zero_grads({"p": p})
    assert p.grad is None
