"""Tensor primitives against independent brute-force oracles."""

import numpy as np
import pytest

from contourseg import tensor as T


def conv_oracle(x, w, b, stride=1, pad=1):
    """Direct nested-loop cross-correlation, zero padded."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += w[oi, ci, ki, kj] * xp[ni, ci, i * stride + ki, j * stride + kj]
                    out[ni, oi, i, j] = acc + b[oi]
    return out


def layer(w, b):
    return T.LayerParams(weights=T.Tensor(w), bias=T.Tensor(b))


class TestConv2d:
    def test_scaling_kernel(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, layer(np.full((1, 1, 1, 1), 2.0), np.zeros(1)))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_zero_input_isolates_bias(self):
        x = T.Tensor(np.zeros((1, 1, 1, 1)))
        out = T.conv2d(x, layer(np.random.default_rng(0).normal(size=(1, 1, 3, 3)), np.array([1.5])))
        assert out.data.reshape(-1)[0] == pytest.approx(1.5, abs=0)

    def test_matches_direct_oracle_same_padding(self):
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        w = np.ones((1, 1, 3, 3))
        b = np.zeros(1)
        out = T.conv2d(T.Tensor(x), layer(w, b))
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, pad=1), atol=1e-12)

    def test_matches_direct_oracle_random(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(T.Tensor(x), layer(w, b), stride=1, padding="same")
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, pad=1), atol=1e-10)

    def test_stride_two_explicit_padding(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 2, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(T.Tensor(x), layer(w, b), stride=2, padding=0)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride=2, pad=0), atol=1e-10)

    def test_channel_mismatch_names_shapes(self):
        x = T.Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(T.ShapeMismatchError) as err:
            T.conv2d(x, layer(np.zeros((1, 3, 3, 3)), np.zeros(1)))
        assert "2" in str(err.value) and "3" in str(err.value)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            layer(np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestRelu:
    def test_basic(self):
        np.testing.assert_array_equal(
            T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0]
        )

    def test_all_negative(self):
        out = T.relu(T.Tensor(-np.ones((3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_relu_pair_is_abs(self):
        x = np.random.default_rng(1).normal(size=(4, 5))
        got = T.relu(T.Tensor(x)).data + T.relu(T.Tensor(-x)).data
        np.testing.assert_array_equal(got, np.abs(x))


class TestSigmoid:
    def test_zero_is_half(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5

    def test_symmetry_sums_to_one(self):
        x = np.random.default_rng(2).normal(size=7) * 4
        s = T.sigmoid(T.Tensor(x)).data + T.sigmoid(T.Tensor(-x)).data
        np.testing.assert_allclose(s, np.ones(7), atol=1e-15)

    def test_high_precision_value(self):
        import math

        expected = 1.0 / (1.0 + math.exp(-10.0))
        assert abs(T.sigmoid(T.Tensor([10.0])).data[0] - expected) < 1e-12

    def test_stable_for_large_magnitudes(self):
        out = T.sigmoid(T.Tensor([800.0, -800.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)


def pool_oracle(x, out_h, out_w, reduce_fn):
    """Partition the grid with floor boundaries and reduce each window."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            r0, r1 = i * h // out_h, (i + 1) * h // out_h
            c0, c1 = j * w // out_w, (j + 1) * w // out_w
            out[:, :, i, j] = reduce_fn(x[:, :, r0:r1, c0:c1])
    return out


class TestPooling:
    def test_maxpool_identity(self):
        x = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
        np.testing.assert_array_equal(T.maxpool2d(T.Tensor(x), 4, 4).data, x)

    def test_maxpool_to_single_cell(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert T.maxpool2d(T.Tensor(x), 1, 1).data.reshape(-1)[0] == 4.0

    def test_maxpool_window_oracle(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 6, 6))
        got = T.maxpool2d(T.Tensor(x), 2, 3).data
        want = pool_oracle(x, 2, 3, lambda b: b.max(axis=(2, 3)))
        np.testing.assert_array_equal(got, want)

    def test_maxpool_zero_output_dim_rejected(self):
        with pytest.raises(ValueError):
            T.maxpool2d(T.Tensor(np.zeros((1, 1, 4, 4))), 0, 2)

    def test_maxpool_tie_routes_to_first_row_major(self):
        x = np.zeros((1, 1, 2, 2))
        t = T.Tensor(x)
        with T.Graph() as g:
            out = T.maxpool2d(t, 1, 1)
            T.backward(g, T.total(out))
        want = np.zeros((1, 1, 2, 2))
        want[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(t.grad, want)

    def test_avgpool_constant(self):
        x = np.full((1, 1, 6, 6), 3.25)
        np.testing.assert_allclose(T.avgpool2d(T.Tensor(x), 2, 2).data, np.full((1, 1, 2, 2), 3.25))

    def test_avgpool_to_single_cell(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert T.avgpool2d(T.Tensor(x), 1, 1).data.reshape(-1)[0] == 2.5

    def test_avgpool_window_oracle(self):
        x = np.random.default_rng(8).normal(size=(1, 2, 6, 6))
        got = T.avgpool2d(T.Tensor(x), 3, 2).data
        want = pool_oracle(x, 3, 2, lambda b: b.mean(axis=(2, 3)))
        np.testing.assert_allclose(got, want, atol=1e-12)


def bilinear_oracle(x, out_h, out_w):
    """Scalar half-pixel-center interpolation, one output pixel at a time."""
    in_h, in_w = x.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
            sx = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            ty, tx = sy - y0, sx - x0
            out[i, j] = (
                x[y0, x0] * (1 - ty) * (1 - tx)
                + x[y0, x1] * (1 - ty) * tx
                + x[y1, x0] * ty * (1 - tx)
                + x[y1, x1] * ty * tx
            )
    return out


class TestUpsample:
    def test_constant_stays_constant(self):
        x = np.full((1, 2, 3, 3), 0.7)
        out = T.upsample_bilinear(T.Tensor(x), 7, 5).data
        np.testing.assert_allclose(out, np.full((1, 2, 7, 5), 0.7), atol=1e-12)

    def test_identity_when_same_dims(self):
        x = np.random.default_rng(9).normal(size=(1, 1, 4, 6))
        np.testing.assert_allclose(T.upsample_bilinear(T.Tensor(x), 4, 6).data, x, atol=1e-12)

    def test_two_by_two_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        got = T.upsample_bilinear(T.Tensor(x.reshape(1, 1, 2, 2)), 4, 4).data[0, 0]
        np.testing.assert_allclose(got, bilinear_oracle(x, 4, 4), atol=1e-12)

    def test_random_resize_oracle(self):
        x = np.random.default_rng(10).normal(size=(5, 7))
        got = T.upsample_bilinear(T.Tensor(x.reshape(1, 1, 5, 7)), 9, 4).data[0, 0]
        np.testing.assert_allclose(got, bilinear_oracle(x, 9, 4), atol=1e-12)


class TestConcat:
    def test_single_input_identity(self):
        x = np.random.default_rng(11).normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(T.concat_channels([T.Tensor(x)]).data, x)

    def test_two_constant_planes(self):
        a = np.full((1, 1, 2, 2), 2.0)
        b = np.full((1, 1, 2, 2), 5.0)
        out = T.concat_channels([T.Tensor(a), T.Tensor(b)]).data
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out[:, 0:1], a)
        np.testing.assert_array_equal(out[:, 1:2], b)

    def test_three_way_round_trip(self):
        rng = np.random.default_rng(12)
        parts = [rng.normal(size=(2, c, 3, 3)) for c in (1, 2, 4)]
        out = T.concat_channels([T.Tensor(p) for p in parts]).data
        offsets = [0, 1, 3, 7]
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            np.testing.assert_array_equal(out[:, lo:hi], part)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(T.ShapeMismatchError):
            T.concat_channels([T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 2)))])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.random.default_rng(13).normal(size=(3, 4)))
        with T.Graph() as g:
            T.backward(g, T.total(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_dead_relu_gradient_is_zero(self):
        x = T.Tensor(-np.abs(np.random.default_rng(14).normal(size=(3, 3))) - 0.1)
        with T.Graph() as g:
            T.backward(g, T.total(T.relu(x)))
        np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))

    def test_non_scalar_root_rejected(self):
        x = T.Tensor(np.zeros((2, 2)))
        with T.Graph() as g:
            y = T.relu(x)
            with pytest.raises(ValueError):
                T.backward(g, y)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor(np.ones(4))
        with T.Graph() as g:
            s = T.total(x)
        T.backward(g, s)
        T.backward(g, s)
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))

    def test_composite_matches_finite_differences(self):
        from contourseg.gradcheck import check_tensors

        rng = np.random.default_rng(15)

        def build(a, w, b):
            conv = T.conv2d(a, T.LayerParams(weights=w, bias=b))
            return T.upsample_bilinear(T.sigmoid(conv), 6, 6)

        err = check_tensors(build, [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)])
        assert err < 1e-4


class TestInvariants:
    def test_linearity_of_linear_ops(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(1, 2, 6, 6))
        y = rng.normal(size=(1, 2, 6, 6))
        a, b = 1.7, -0.6
        w = rng.normal(size=(3, 2, 3, 3))
        zero_b = np.zeros(3)

        def lin(f):
            lhs = f(a * x + b * y)
            rhs = a * f(x) + b * f(y)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

        lin(lambda v: T.conv2d(T.Tensor(v), layer(w, zero_b)).data)
        lin(lambda v: T.avgpool2d(T.Tensor(v), 3, 3).data)
        lin(lambda v: T.upsample_bilinear(T.Tensor(v), 9, 5).data)
        lin(lambda v: T.concat_channels([T.Tensor(v), T.Tensor(v)]).data)

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        first = T.conv2d(T.Tensor(x), layer(w, b)).data
        second = T.conv2d(T.Tensor(x), layer(w, b)).data
        assert np.array_equal(first, second)

    def test_all_values_finite_after_ops(self):
        rng = np.random.default_rng(18)
        x = T.Tensor(rng.normal(size=(1, 2, 6, 6)) * 50)
        out = T.sigmoid(T.conv2d(T.relu(x), layer(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))))
        assert np.all(np.isfinite(out.data))

    def test_float32_inputs_stay_float32(self):
        x = T.Tensor(np.ones((1, 1, 4, 4), np.float32))
        out = T.conv2d(x, layer(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32)))
        assert out.dtype == np.float32
