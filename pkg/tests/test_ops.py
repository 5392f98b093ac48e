"""Tests for :mod:`twinlite.ops` against closed forms and brute-force oracles."""
import math
import unittest

import numpy as np

from tests import oracles
from twinlite import ops
from twinlite.errors import ShapeError
from twinlite.tensor import ConvParams, Tensor, conv_output_size


def random(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestConvolution(unittest.TestCase):
    """conv2d and conv_transpose2d."""

    def test_identity_kernel(self):
        """A centred unit kernel with padding 1 reproduces the input."""
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, Tensor(kernel), params=ConvParams(padding=1))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilated_conv_matches_oracle(self):
        """Test dilated conv2d against the loop oracle."""
        x, weight = random((1, 2, 5, 5), 1), random((4, 2, 3, 3), 2)
        out = ops.conv2d(x, weight, params=ConvParams(padding=2, dilation=2))
        expected = oracles.conv2d(x.data, weight.data, padding=2, dilation=2)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_conv_matches_oracle_single_precision(self):
        """Strided, grouped, biased case in float32."""
        x = Tensor(np.random.default_rng(3).standard_normal((2, 4, 7, 6)), dtype="single")
        weight = Tensor(np.random.default_rng(4).standard_normal((6, 2, 3, 3)), dtype="single")
        bias = Tensor(np.arange(6.0), dtype="single")
        params = ConvParams(stride=2, padding=1, groups=2)
        out = ops.conv2d(x, weight, bias, params)
        expected = oracles.conv2d(
            x.data.astype(np.float64), weight.data.astype(np.float64), bias.data, stride=2, padding=1, groups=2
        )
        assert np.abs(out.data - expected).max() < 1e-5

    def test_shape_inference_sweep(self):
        """Output shapes follow the documented formula for stride, dilation and kernel sweeps."""
        x = random((1, 2, 37, 41), 5)
        for stride in (1, 2):
            for dilation in (1, 2, 4, 8, 16):
                for kernel in (1, 2, 3):
                    padding = dilation * (kernel - 1) // 2
                    with self.subTest(stride=stride, dilation=dilation, kernel=kernel):
                        out = ops.conv2d(
                            x,
                            random((3, 2, kernel, kernel), 6),
                            params=ConvParams(stride=stride, padding=padding, dilation=dilation),
                        )
                        assert out.shape == (
                            1,
                            3,
                            conv_output_size(37, kernel, stride, padding, dilation),
                            conv_output_size(41, kernel, stride, padding, dilation),
                        )

    def test_conv_is_linear(self):
        """Test that conv2d is linear in its input."""
        x, y, weight = random((1, 3, 6, 6), 7), random((1, 3, 6, 6), 8), random((2, 3, 3, 3), 9)
        params = ConvParams(padding=1)
        combined = ops.conv2d(Tensor(2.0 * x.data - 3.0 * y.data), weight, params=params).data
        separate = 2.0 * ops.conv2d(x, weight, params=params).data - 3.0 * ops.conv2d(y, weight, params=params).data
        assert np.abs(combined - separate).max() <= 1e-5 * np.abs(separate).max()

    def test_channel_mismatch_names_dimension(self):
        """Test that a channel mismatch names the dimension."""
        with self.assertRaises(ShapeError) as context:
            ops.conv2d(random((1, 3, 4, 4)), random((2, 4, 3, 3)))
        assert "input channels" in str(context.exception)

    def test_degenerate_output_is_rejected(self):
        """Test that an empty output size is rejected."""
        with self.assertRaises(ShapeError):
            ops.conv2d(random((1, 1, 2, 2)), random((1, 1, 3, 3)))

    def test_transpose_of_ones(self):
        """Non-overlapping 2x2 blocks of ones."""
        out = ops.conv_transpose2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))

    def test_transpose_doubles_odd_sizes(self):
        """Test that the transposed conv doubles odd sizes."""
        out = ops.conv_transpose2d(random((1, 2, 45, 80)), random((2, 1, 2, 2)), stride=2)
        assert out.shape == (1, 1, 90, 160)

    def test_transpose_matches_oracle(self):
        """Test conv_transpose2d against the loop oracle."""
        x, weight, bias = random((2, 3, 4, 3), 10), random((3, 2, 3, 3), 11), random((2,), 12)
        out = ops.conv_transpose2d(x, weight, bias, stride=2)
        expected = oracles.conv_transpose2d(x.data, weight.data, bias.data, stride=2)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_transpose_is_adjoint_of_conv(self):
        """<conv(y), x> == <y, conv_transpose(x)> for the same kernel."""
        weight = random((3, 2, 2, 2), 13)
        x = random((1, 3, 4, 4), 14)
        y = random((1, 2, 8, 8), 15)
        forward = ops.conv2d(y, weight, params=ConvParams(stride=2)).data
        adjoint = ops.conv_transpose2d(x, weight, stride=2).data
        assert abs((forward * x.data).sum() - (y.data * adjoint).sum()) < 1e-10


class TestRandomizedOracles(unittest.TestCase):
    """Small random instances of every structured op against the brute-force oracles."""

    INSTANCES = 60

    def check(self, actual, expected, dtype):
        if dtype == "double":
            assert np.abs(actual - expected).max() < 1e-12
        else:
            assert np.abs(actual - expected).max() < 1e-6 * max(1.0, np.abs(expected).max())

    def instances(self, seed):
        rng = np.random.default_rng(seed)
        for index in range(self.INSTANCES):
            dtype = "double" if index % 2 else "single"

            def tensor(shape, dtype=dtype):
                return Tensor(rng.uniform(-1.0, 1.0, shape), dtype=dtype)

            yield index, rng, dtype, tensor

    def test_conv2d(self):
        """Test conv2d on random configurations against the oracle."""
        for index, rng, dtype, tensor in self.instances(100):
            groups = int(rng.integers(1, 3))
            kernel, dilation = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
            reach = dilation * (kernel - 1) + 1
            height = int(rng.integers(max(1, reach - 2 * padding), 9))
            width = int(rng.integers(max(1, reach - 2 * padding), 9))
            in_group, out_group = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = tensor((int(rng.integers(1, 3)), in_group * groups, height, width))
            weight = tensor((out_group * groups, in_group, kernel, kernel))
            bias = tensor((out_group * groups,))
            params = ConvParams(stride=stride, padding=padding, dilation=dilation, groups=groups)
            with self.subTest(index=index, params=params, shape=x.shape):
                out = ops.conv2d(x, weight, bias, params)
                expected = oracles.conv2d(
                    x.data.astype(np.float64),
                    weight.data.astype(np.float64),
                    bias.data.astype(np.float64),
                    stride=stride,
                    padding=padding,
                    dilation=dilation,
                    groups=groups,
                )
                self.check(out.data, expected, dtype)

    def test_conv_transpose2d(self):
        """Test conv_transpose2d on random configurations against the oracle."""
        for index, rng, dtype, tensor in self.instances(200):
            kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            x = tensor((int(rng.integers(1, 3)),) + tuple(int(size) for size in rng.integers(1, 5, 3)))
            weight = tensor((x.shape[1], int(rng.integers(1, 5)), kernel, kernel))
            bias = tensor((weight.shape[1],))
            with self.subTest(index=index, stride=stride, shape=x.shape):
                out = ops.conv_transpose2d(x, weight, bias, stride)
                expected = oracles.conv_transpose2d(
                    x.data.astype(np.float64),
                    weight.data.astype(np.float64),
                    bias.data.astype(np.float64),
                    stride,
                )
                self.check(out.data, expected, dtype)

    def test_avg_pool2d(self):
        """Test avg_pool2d on random configurations against the oracle."""
        for index, rng, dtype, tensor in self.instances(300):
            kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            batch, channels = int(rng.integers(1, 3)), int(rng.integers(1, 5))
            x = tensor((batch, channels, int(rng.integers(kernel, 9)), int(rng.integers(kernel, 9))))
            with self.subTest(index=index, kernel=kernel, stride=stride, shape=x.shape):
                out = ops.avg_pool2d(x, kernel, stride)
                self.check(out.data, oracles.avg_pool2d(x.data.astype(np.float64), kernel, stride), dtype)

    def test_bmm(self):
        """Test bmm on random shapes against the oracle."""
        for index, rng, dtype, tensor in self.instances(400):
            batch, rows, inner, cols = (int(size) for size in rng.integers(1, 9, 4))
            a, b = tensor((batch, rows, inner)), tensor((batch, inner, cols))
            with self.subTest(index=index, a=a.shape, b=b.shape):
                expected = oracles.bmm(a.data.astype(np.float64), b.data.astype(np.float64))
                self.check(ops.bmm(a, b).data, expected, dtype)


class TestNormalizationAndActivation(unittest.TestCase):
    """batch_norm, prelu and avg_pool2d."""

    def _bn_args(self, channels, dtype="double"):
        return (
            Tensor(np.ones(channels), dtype=dtype),
            Tensor(np.zeros(channels), dtype=dtype),
            Tensor(np.zeros(channels), dtype=dtype),
            Tensor(np.ones(channels), dtype=dtype),
        )

    def test_identity_statistics(self):
        """Test that identity statistics leave the input unchanged."""
        x = random((2, 3, 4, 4), 20)
        out = ops.batch_norm(x, *self._bn_args(3), eps=0.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_training_mode_normalizes(self):
        """Per-channel mean 0 and variance 1, and running statistics move by the momentum."""
        x = Tensor(np.random.default_rng(21).normal(3.0, 2.0, (4, 3, 5, 5)))
        gamma, beta, mean, var = self._bn_args(3)
        out = ops.batch_norm(x, gamma, beta, mean, var, eps=0.0, training=True)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.data.var(axis=(0, 2, 3)) - 1).max() < 1e-4
        expected_mean = 0.1 * x.data.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(mean.data, expected_mean, rtol=1e-12)
        expected_var = 0.9 + 0.1 * x.data.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(var.data, expected_var, rtol=1e-12)

    def test_inference_affine(self):
        """gamma 2, beta 0.5 applied to the normalized value."""
        x = random((1, 1, 3, 3), 22)
        out = ops.batch_norm(
            x,
            Tensor(np.array([2.0])),
            Tensor(np.array([0.5])),
            Tensor(np.array([0.3])),
            Tensor(np.array([1.7])),
            eps=1e-3,
        )
        expected = 2.0 * (x.data - 0.3) / math.sqrt(1.7 + 1e-3) + 0.5
        np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)

    def test_statistics_length_mismatch(self):
        """Test that statistics need one entry per channel."""
        with self.assertRaises(ShapeError):
            ops.batch_norm(random((1, 3, 2, 2)), *self._bn_args(2))

    def test_prelu(self):
        """Test PReLU on both signs."""
        x = Tensor(np.array([[-2.0, 3.0]]).reshape(1, 1, 1, 2))
        out = ops.prelu(x, Tensor(np.array([0.25])))
        np.testing.assert_array_equal(out.data.ravel(), [-0.5, 3.0])
        relu = ops.prelu(x, Tensor(np.array([0.0])))
        np.testing.assert_array_equal(relu.data.ravel(), [0.0, 3.0])
        positive = Tensor(np.abs(random((1, 2, 3, 3)).data))
        np.testing.assert_array_equal(ops.prelu(positive, Tensor(np.ones(2) * 0.7)).data, positive.data)

    def test_avg_pool(self):
        """Test average pooling against closed forms and the oracle."""
        out = ops.avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
        assert out.item() == 2.5
        constant = ops.avg_pool2d(Tensor(np.full((1, 2, 8, 8), 3.0)), 4)
        np.testing.assert_array_equal(constant.data, np.full((1, 2, 2, 2), 3.0))
        x = random((2, 3, 7, 8), 23)
        np.testing.assert_allclose(ops.avg_pool2d(x, 3, 2).data, oracles.avg_pool2d(x.data, 3, 2), atol=1e-12)


class TestSoftmaxAndMatmul(unittest.TestCase):
    """softmax, bmm and the elementwise suite."""

    def test_softmax_closed_forms(self):
        """Test softmax on uniform and one-hot inputs."""
        equal = ops.softmax_channels(Tensor(np.zeros((1, 2, 1, 1)))).data.ravel()
        np.testing.assert_allclose(equal, [0.5, 0.5])
        skewed = ops.softmax_channels(Tensor(np.array([0.0, math.log(9.0)]).reshape(1, 2, 1, 1)))
        np.testing.assert_allclose(skewed.data.ravel(), [0.1, 0.9], atol=1e-9)

    def test_softmax_is_stable(self):
        """Test that large logits do not overflow."""
        out = ops.softmax_channels(Tensor(np.array([1e4, -1e4, 0.0]).reshape(1, 3, 1, 1)))
        assert np.isfinite(out.data).all()
        probs = ops.softmax_channels(random((2, 4, 3, 3), 30)).data
        assert ((probs > 0) & (probs < 1)).all()
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6

    def test_bmm(self):
        """Test bmm against numpy matmul."""
        a = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        b = Tensor(np.array([[[5.0, 6.0], [7.0, 8.0]]]))
        np.testing.assert_array_equal(ops.bmm(a, b).data, [[[19.0, 22.0], [43.0, 50.0]]])
        identity = Tensor(np.eye(2)[None])
        np.testing.assert_array_equal(ops.bmm(a, identity).data, a.data)
        x, y = random((3, 4, 5), 31), random((3, 5, 2), 32)
        np.testing.assert_allclose(ops.bmm(x, y).data, oracles.bmm(x.data, y.data), atol=1e-12)
        with self.assertRaises(ShapeError):
            ops.bmm(x, x)

    def test_elementwise_suite(self):
        """Test the elementwise ops and their shape checks."""
        x, y, z = random((1, 16, 2, 2), 40), random((1, 16, 2, 2), 41), random((1, 16, 2, 2), 42)
        np.testing.assert_array_equal(ops.add(x, Tensor(np.zeros(x.shape))).data, x.data)
        assert ops.concat_channels([x, y]).shape == (1, 32, 2, 2)
        left = ops.mul(x, ops.add(y, z)).data
        right = ops.add(ops.mul(x, y), ops.mul(x, z)).data
        assert np.abs(left - right).max() < 1e-6
        np.testing.assert_array_equal(ops.scale(x, 2.0).data, 2.0 * x.data)
        with self.assertRaises(ShapeError):
            ops.add(x, random((1, 8, 2, 2)))
        with self.assertRaises(ShapeError):
            ops.concat_channels([x, random((1, 16, 3, 2))])


if __name__ == "__main__":
    unittest.main()
