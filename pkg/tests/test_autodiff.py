import io

import numpy as np
import pytest

import esr_forge.autodiff as ad
from esr_forge.autodiff import Parameter, ShapeError, Tensor


def P(rng, shape):
    return Parameter(rng.normal(size=shape), dtype=np.float64)


def C(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


class TestConv2d:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)), dtype=np.float64)
        k = Parameter(np.eye(3).reshape(3, 3, 1, 1), dtype=np.float64)
        b = Parameter(np.zeros(3), dtype=np.float64)
        out = ad.conv2d(x, k, b)
        assert np.array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((2, 3, 4, 5)), dtype=np.float64)
        k = Parameter(np.random.default_rng(1).normal(size=(4, 3, 3, 3)), dtype=np.float64)
        b = Parameter(np.array([1.0, -2.0, 0.5, 3.0]), dtype=np.float64)
        out = ad.conv2d(x, k, b)
        for co in range(4):
            assert np.allclose(out.data[:, co], b.data[co])

    def test_3x3_dot_product_oracle(self):
        # single output pixel of a 3x3 input: plain 9-term dot product
        rng = np.random.default_rng(2)
        xv = rng.normal(size=(1, 1, 3, 3))
        kv = rng.normal(size=(1, 1, 3, 3))
        out = ad.conv2d(Tensor(xv, dtype=np.float64),
                        Parameter(kv, dtype=np.float64),
                        Parameter(np.zeros(1), dtype=np.float64))
        center = sum(xv[0, 0, i, j] * kv[0, 0, i, j] for i in range(3) for j in range(3))
        assert out.data[0, 0, 1, 1] == pytest.approx(center, rel=1e-12)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Parameter(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv2d(x, k, Parameter(np.zeros(4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Parameter(np.zeros((1, 1, 2, 2))),
                      Parameter(np.zeros(1)))


class TestElementwise:
    def test_relu_values(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert list(out.data) == [0.0, 0.0, 2.0]

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_sigmoid_pointwise_oracle(self):
        x = np.linspace(-8, 8, 41)
        out = ad.sigmoid(Tensor(x, dtype=np.float64)).data
        ref = 1.0 / (1.0 + np.exp(-x))
        assert np.allclose(out, ref, atol=1e-12)
        assert np.all(np.diff(out) > 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestSoftmax:
    def test_uniform_row(self):
        out = ad.softmax_lastdim(Tensor(np.zeros((1, 4)), dtype=np.float64))
        assert np.allclose(out.data, 0.25)

    def test_one_hot_limit(self):
        out = ad.softmax_lastdim(Tensor(np.array([[1000.0, 0.0, 0.0]]), dtype=np.float64))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = ad.softmax_lastdim(Tensor(rng.normal(size=(3, 5)) * 7, dtype=np.float64))
        assert np.abs(out.data.sum(axis=-1) - 1).max() < 1e-6
        assert out.data.min() >= 0 and out.data.max() <= 1


class TestLayerNorm:
    def test_constant_channels_zeroed(self):
        x = Tensor(np.full((1, 4, 2, 2), 7.0), dtype=np.float64)
        g = Parameter(np.ones(4), dtype=np.float64)
        b = Parameter(np.zeros(4), dtype=np.float64)
        out = ad.layer_norm_channels(x, g, b)
        assert np.allclose(out.data, 0.0)

    def test_moments(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 8, 3, 3)) * 5, dtype=np.float64)
        out = ad.layer_norm_channels(x, Parameter(np.ones(8), dtype=np.float64),
                                     Parameter(np.zeros(8), dtype=np.float64)).data
        assert np.abs(out.mean(axis=1)).max() < 1e-4
        assert np.abs(out.var(axis=1) - 1).max() < 1e-3

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=(1, 4, 2, 2))
        g = Parameter(rng.uniform(0.5, 2, 4), dtype=np.float64)
        b = Parameter(rng.normal(size=4), dtype=np.float64)
        a = ad.layer_norm_channels(Tensor(xv, dtype=np.float64), g, b).data
        c = ad.layer_norm_channels(Tensor(xv + 3.25, dtype=np.float64), g, b).data
        assert np.allclose(a, c, atol=1e-10)


class TestMatmul:
    def test_identity(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(1, 2, 3))
        eye = Tensor(np.eye(2, dtype=np.float64)[None])
        out = ad.matmul_batched(eye, x)
        assert np.array_equal(out.data, x.data)

    def test_shapes(self):
        a = Tensor(np.zeros((1, 2, 3)))
        b = Tensor(np.zeros((1, 3, 2)))
        assert ad.matmul_batched(a, b).shape == (1, 2, 2)

    def test_hand_oracle_2x2(self):
        a = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        b = np.array([[[5.0, 6.0], [7.0, 8.0]]])
        out = ad.matmul_batched(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        assert np.array_equal(out.data, np.array([[[19.0, 22.0], [43.0, 50.0]]]))

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul_batched(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 3))))


class TestPixelShuffle:
    def test_r1_identity(self):
        x = Tensor(np.random.default_rng(6).normal(size=(1, 3, 2, 2)), dtype=np.float64)
        assert np.array_equal(ad.pixel_shuffle(x, 1).data, x.data)

    def test_shape_and_multiset(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 2, 2))
        out = ad.pixel_shuffle(x, 2)
        assert out.shape == (1, 1, 4, 4)
        assert sorted(out.data.ravel()) == sorted(x.data.ravel())

    def test_index_convention(self):
        # out[c][r*y+dy][r*x+dx] = in[c*r^2 + dy*r + dx][y][x]
        x = np.zeros((1, 4, 2, 2))
        x[0, 2, 1, 0] = 9.0  # c=0, dy=1, dx=0 at (y=1, x=0)
        out = ad.pixel_shuffle(Tensor(x, dtype=np.float64), 2)
        assert out.data[0, 0, 3, 0] == 9.0

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 12, 3, 4)), dtype=np.float64)
        back = ad.pixel_unshuffle(ad.pixel_shuffle(x, 2), 2)
        assert np.array_equal(back.data, x.data)

    def test_indivisible_channels(self):
        with pytest.raises(ShapeError):
            ad.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


class TestBackward:
    def test_sum_gradient_all_ones(self):
        x = Parameter(np.random.default_rng(8).normal(size=(3, 4)), dtype=np.float64)
        ad.backward(ad.tensor_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_add_distributes_exactly(self):
        rng = np.random.default_rng(9)
        x, y = P(rng, (2, 3)), P(rng, (2, 3))
        w = C(rng, (2, 3))
        ad.backward(ad.tensor_sum(ad.mul(ad.add(x, y), w)))
        assert np.array_equal(x.grad, w.data)
        assert np.array_equal(y.grad, w.data)

    def test_concat_splits_exactly(self):
        rng = np.random.default_rng(10)
        a = P(rng, (1, 2, 2, 2))
        b = P(rng, (1, 3, 2, 2))
        w = C(rng, (1, 5, 2, 2))
        ad.backward(ad.tensor_sum(ad.mul(ad.concat_channels([a, b]), w)))
        assert np.array_equal(a.grad, w.data[:, :2])
        assert np.array_equal(b.grad, w.data[:, 2:])

    def test_unused_parameter_zero_grad(self):
        rng = np.random.default_rng(11)
        x, unused = P(rng, (3,)), P(rng, (3,))
        ad.backward(ad.tensor_sum(ad.mul(x, x)))
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_grad_accumulates_across_backwards(self):
        x = Parameter(np.ones(2), dtype=np.float64)
        ad.backward(ad.tensor_sum(x))
        ad.backward(ad.tensor_sum(x))
        assert np.array_equal(x.grad, np.full(2, 2.0))

    def test_backward_needs_scalar(self):
        x = Parameter(np.ones(3), dtype=np.float64)
        with pytest.raises(ShapeError):
            ad.backward(ad.scale(x, 2.0))


class TestGradCheck:
    def test_linear_function_tiny_error(self):
        x = Parameter(np.random.default_rng(12).normal(size=(4,)), dtype=np.float64)
        err = ad.grad_check(lambda: ad.tensor_sum(x), [x])
        assert err < 1e-9

    def test_conv_sigmoid_composite(self):
        rng = np.random.default_rng(13)
        x = P(rng, (1, 1, 2, 2))
        k = P(rng, (1, 1, 1, 1))
        b = P(rng, (1,))

        def f():
            s = ad.tensor_sum(ad.sigmoid(ad.conv2d(x, k, b)))
            return ad.mul(s, s)

        assert ad.grad_check(f, [x, k, b]) <= 1e-4

    def test_requires_float64(self):
        x = Parameter(np.ones(2, dtype=np.float32))
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.tensor_sum(x), [x])

    def test_non_scalar_rejected(self):
        x = Parameter(np.ones(2), dtype=np.float64)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.scale(x, 1.0), [x])


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Parameter(np.ones(3), dtype=np.float64)
        with ad.no_grad():
            out = ad.scale(x, 2.0)
        assert out._backward is None and out._parents == ()


class TestTensorDump:
    def test_round_trip_f32_f64(self):
        rng = np.random.default_rng(14)
        for dtype in (np.float32, np.float64):
            arr = rng.normal(size=(2, 3, 4)).astype(dtype)
            buf = io.BytesIO()
            ad.write_tensor(buf, arr)
            buf.seek(0)
            back = ad.read_tensor(buf, dtype)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)

    def test_header_layout(self):
        buf = io.BytesIO()
        ad.write_tensor(buf, np.zeros((2, 3), dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"TNSR"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 6 * 4

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            ad.read_tensor(io.BytesIO(b"XXXX" + b"\0" * 16), np.float32)
