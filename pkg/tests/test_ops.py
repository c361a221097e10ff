"""Forward semantics of the numeric kernels against trivial cases and
brute-force oracles."""

import numpy as np
import pytest

from conftest import conv2d_loops, conv3d_loops
from octoforce import (BNState, ShapeError, Tensor, batch_norm, concat_channels,
                       conv2d, conv3d, dense, gap, mse_loss, relu)
from octoforce.tensor import tsum


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((2, 4, 4, 4, 1), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 1, 1, 1), np.float32))
        np.testing.assert_array_equal(conv3d(x, k).data, x.data)

    def test_zero_kernel_zero_output_and_zero_kernel_grad(self, rng):
        x = Tensor(rng.random((1, 4, 4, 4, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 3, 2, 2), np.float32), requires_grad=True)
        b = Tensor(np.zeros(2, np.float32))
        out = conv3d(x, k, b)
        assert not out.data.any()
        loss = mse_loss(gap(out), Tensor(np.zeros((1, 2), np.float32)))
        loss.backward()
        assert not k.grad.any()

    def test_matches_loop_oracle_spec_example(self, rng):
        x = rng.random((1, 4, 4, 4, 2))
        k = rng.standard_normal((3, 3, 3, 2, 3))
        got = conv3d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=2)
        np.testing.assert_allclose(got.data, conv3d_loops(x, k, stride=2), atol=1e-6, rtol=0)

    @pytest.mark.parametrize("k", [1, 3])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_oracle_grid_float64(self, rng, k, stride):
        for cin in (1, 2, 3):
            for cout in (1, 2, 3):
                x = rng.random((2, 5, 4, 3, cin))
                w = rng.standard_normal((k, k, k, cin, cout))
                b = rng.standard_normal(cout)
                got = conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                             Tensor(b, dtype=np.float64), stride=stride)
                np.testing.assert_allclose(got.data, conv3d_loops(x, w, b, stride),
                                           atol=1e-6, rtol=0)

    def test_oracle_float32(self, rng):
        x = rng.random((1, 4, 4, 4, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 3, 2)).astype(np.float32)
        got = conv3d(Tensor(x), Tensor(w), stride=1)
        ref = conv3d_loops(x.astype(np.float64), w.astype(np.float64))
        np.testing.assert_allclose(got.data, ref, atol=1e-3, rtol=0)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.random((1, 4, 4, 4, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 3, 3, 2), np.float32))
        with pytest.raises(ShapeError):
            conv3d(x, k)

    def test_bad_kernel_extent_raises(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.zeros((1, 4, 4, 4, 1))), Tensor(np.zeros((5, 5, 5, 1, 1))))
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.zeros((1, 4, 4, 4, 1))), Tensor(np.zeros((3, 3, 3, 1, 1))),
                   stride=3)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((2, 5, 5, 3), dtype=np.float32))
        k = Tensor(np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3))
        np.testing.assert_array_equal(conv2d(x, k).data, x.data)

    def test_averaging_kernel_preserves_constant_interior(self):
        c = 0.7
        x = Tensor(np.full((1, 6, 6, 1), c, np.float32))
        k = Tensor(np.full((3, 3, 1, 1), 1.0 / 9.0, np.float32))
        out = conv2d(x, k).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1, 0], c, atol=1e-6)
        assert (out[0, 0, :, 0] < c).all()  # border sees zero padding

    def test_matches_loop_oracle_spec_example(self, rng):
        x = rng.random((1, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        got = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64))
        np.testing.assert_allclose(got.data, conv2d_loops(x, k), atol=1e-6, rtol=0)

    @pytest.mark.parametrize("k", [1, 3])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_oracle_grid_float64(self, rng, k, stride):
        for cin in (1, 2, 3):
            for cout in (1, 2, 3):
                x = rng.random((2, 5, 4, cin))
                w = rng.standard_normal((k, k, cin, cout))
                got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                             stride=stride)
                np.testing.assert_allclose(got.data, conv2d_loops(x, w, None, stride),
                                           atol=1e-6, rtol=0)


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.standard_normal((8, 4, 4, 4, 3)) * 3.0 + 1.5, dtype=np.float32)
        st = BNState.create(3)
        out = batch_norm(x, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)), st,
                         mode="train").data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2, 3)), 1.0, atol=1e-4)

    def test_zero_gamma_outputs_beta(self, rng):
        x = Tensor(rng.standard_normal((4, 5, 2)), dtype=np.float32)
        beta = np.array([1.0, -2.0], np.float32)
        out = batch_norm(x, Tensor(np.zeros(2, np.float32)), Tensor(beta), BNState.create(2),
                         mode="train").data
        np.testing.assert_array_equal(out, np.broadcast_to(beta, out.shape))

    def test_running_stats_update_in_train_only(self, rng):
        x = Tensor(rng.standard_normal((16, 3)) * 2 + 5, dtype=np.float32)
        st = BNState.create(3, momentum=0.5)
        g, b = Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))
        batch_norm(x, g, b, st, mode="infer")
        np.testing.assert_array_equal(st.mean, np.zeros(3))
        np.testing.assert_array_equal(st.var, np.ones(3))
        batch_norm(x, g, b, st, mode="train")
        np.testing.assert_allclose(st.mean, 0.5 * x.data.mean(axis=0), rtol=1e-5)

    def test_infer_uses_running_stats(self, rng):
        x = Tensor(rng.standard_normal((4, 2)), dtype=np.float32)
        st = BNState(np.array([1.0, 2.0], np.float32), np.array([4.0, 9.0], np.float32))
        out = batch_norm(x, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)),
                         st, mode="infer").data
        expect = (x.data - st.mean) / np.sqrt(st.var + 1e-5)
        np.testing.assert_allclose(out, expect, rtol=1e-6)

    def test_single_element_zero_variance_is_finite(self):
        x = Tensor(np.full((1, 2), 7.0, np.float32))
        out = batch_norm(x, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)),
                         BNState.create(2), mode="train").data
        assert np.isfinite(out).all()


class TestSmallOps:
    def test_relu(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0], np.float32)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_gap_constant(self):
        x = Tensor(np.full((2, 3, 3, 3, 4), 2.5, np.float32))
        np.testing.assert_allclose(gap(x).data, np.full((2, 4), 2.5), rtol=1e-6)

    def test_gap_2d_input(self, rng):
        x = rng.random((2, 4, 4, 3), dtype=np.float32)
        np.testing.assert_allclose(gap(Tensor(x)).data, x.mean(axis=(1, 2)), rtol=1e-6)

    def test_dense(self, rng):
        x = rng.random((4, 5), dtype=np.float32)
        w = rng.random((5, 2), dtype=np.float32)
        b = rng.random(2, dtype=np.float32)
        np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data,
                                   x @ w + b, rtol=1e-6)

    def test_concat_shape_rule_and_order(self, rng):
        t1 = Tensor(rng.random((1, 2, 2, 2, 3), dtype=np.float32))
        t2 = Tensor(rng.random((1, 2, 2, 2, 5), dtype=np.float32))
        out = concat_channels(t1, t2)
        assert out.shape == (1, 2, 2, 2, 8)
        np.testing.assert_array_equal(out.data[..., :3], t1.data)

    def test_concat_slice_recovery_bit_exact(self, rng):
        t1 = Tensor(rng.random((2, 3, 3, 2), dtype=np.float32))
        t2 = Tensor(rng.random((2, 3, 3, 4), dtype=np.float32))
        out = concat_channels(t1, t2).data
        assert np.array_equal(out[..., :2], t1.data)
        assert np.array_equal(out[..., 2:], t2.data)

    def test_concat_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.zeros((1, 2, 2, 2, 1))),
                            Tensor(np.zeros((1, 2, 3, 2, 1))))


class TestMSELoss:
    def test_zero_when_equal(self, rng):
        y = Tensor(rng.random((4, 3), dtype=np.float32))
        assert mse_loss(y, Tensor(y.data.copy())).item() == 0.0

    def test_hand_evaluated_example(self):
        target = Tensor(np.array([[0, 0, 0], [1, 1, 1]], np.float64))
        pred = Tensor(np.zeros((2, 3), np.float64))
        assert mse_loss(pred, target).item() == pytest.approx(0.5, abs=1e-12)

    def test_gradient_formula(self, rng):
        y = rng.random((3, 3))
        p = Tensor(rng.random((3, 3)), requires_grad=True, dtype=np.float64)
        mse_loss(p, Tensor(y, dtype=np.float64)).backward()
        np.testing.assert_allclose(p.grad, -2 * (y - p.data) / 9.0, rtol=1e-12)

    def test_batch_permutation_invariance(self, rng):
        p = rng.random((6, 3))
        y = rng.random((6, 3))
        perm = rng.permutation(6)
        a = mse_loss(Tensor(p, dtype=np.float64), Tensor(y, dtype=np.float64)).item()
        b = mse_loss(Tensor(p[perm], dtype=np.float64), Tensor(y[perm], dtype=np.float64)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_sum_kernel_composes_with_ops(rng):
    x = Tensor(rng.random((2, 3, 3, 2), dtype=np.float32), requires_grad=True)
    tsum(relu(x)).backward()
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(np.float32))
