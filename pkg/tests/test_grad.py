"""Tests for :mod:`twinlite.grad`, plus a numeric check of every differentiable op."""
import unittest

import numpy as np

from twinlite import data, losses, ops
from twinlite.concurrency import run_in_background_thread
from twinlite.errors import GradientError
from twinlite.grad import Tape, current_tape, gradcheck, no_grad
from twinlite.model import ModelConfig, TwinLiteNet
from twinlite.tensor import SINGLE, ConvParams, Tensor

# Element filter and tolerance for the per-op checks.
OP_MIN_MAGNITUDE = 1e-2
OP_TOLERANCE = 1e-6


def random(shape, seed, low=None, high=None):
    rng = np.random.default_rng(seed)
    if low is None:
        return Tensor(rng.standard_normal(shape))
    return Tensor(rng.uniform(low, high, shape))


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """A scalar with a non-trivial gradient with respect to every output element."""
    return ops.sum_all(ops.mul(out, random(out.shape, seed)))


class TestTape(unittest.TestCase):
    """Reverse-mode bookkeeping."""

    def test_sum_gives_ones(self):
        """Test that the gradient of a sum is all ones."""
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
        np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))

    def test_square_gives_twice_input(self):
        """Both operands of mul(x, x) contribute."""
        x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
        np.testing.assert_array_equal(tape.backward(loss)[x], 2 * x.data)

    def test_fan_out_accumulates(self):
        """Test that a tensor used twice collects both gradients."""
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.add(ops.scale(x, 3.0), ops.scale(x, 3.0)))
        np.testing.assert_array_equal(tape.backward(loss)[x], np.full((2, 2), 6.0))

    def test_constants_get_no_gradient(self):
        """Test that tensors without requires_grad get no gradient."""
        x = Tensor(np.ones(3), requires_grad=True)
        constant = Tensor(np.full(3, 2.0))
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, constant))
        gradients = tape.backward(loss)
        assert constant not in gradients
        np.testing.assert_array_equal(gradients[x], constant.data)

    def test_non_scalar_loss_is_rejected(self):
        """Test that backward needs a scalar loss."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ops.scale(x, 2.0)
        with self.assertRaises(GradientError):
            tape.backward(out)

    def test_foreign_loss_is_rejected(self):
        """Test that backward rejects a loss recorded on another tape."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = ops.sum_all(x)
        with Tape() as other:
            pass
        with self.assertRaises(GradientError):
            other.backward(loss)

    def test_no_grad_suspends_recording(self):
        """Test that no_grad records nothing."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = ops.add(x, x)
            assert current_tape() is tape
        assert len(tape) == 0
        assert not y.requires_grad

    def test_nothing_recorded_without_grad_inputs(self):
        """Test that ops on constants are not recorded."""
        with Tape() as tape:
            ops.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert len(tape) == 0

    def test_tapes_are_per_thread(self):
        """A tape active in one thread is invisible to another."""
        background = run_in_background_thread(current_tape)
        try:
            with Tape() as tape:
                assert current_tape() is tape
                assert background().result() is None
        finally:
            background.executor.shutdown()
        assert current_tape() is None


class TestGradcheck(unittest.TestCase):
    """Numeric gradient checks of the op suite in double precision."""

    def check(self, func, inputs, **kwargs):
        report = gradcheck(func, inputs, min_magnitude=OP_MIN_MAGNITUDE, **kwargs)
        assert report.passed(OP_TOLERANCE), report

    def test_linear_function_is_exact(self):
        """Test that central differences are exact on a linear function."""
        coefficients = Tensor(np.array([1.0, -2.0, 0.5]))
        x = Tensor(np.array([0.25, 0.5, -0.75]))
        report = gradcheck(lambda t: ops.sum_all(ops.mul(t, coefficients)), x)
        assert report.checked == 3
        assert report.max_relative_error < 1e-10

    def test_single_precision_is_rejected(self):
        """Test that gradcheck refuses single precision."""
        with self.assertRaises(GradientError):
            gradcheck(ops.sum_all, Tensor(np.ones(3), dtype=SINGLE))

    def test_requires_grad_is_restored(self):
        """Test that gradcheck leaves requires_grad as it found it."""
        x = Tensor(np.ones(3))
        gradcheck(ops.sum_all, x)
        assert not x.requires_grad

    def test_sampling_limits_checked_elements(self):
        """Test that samples bounds the number of checked elements."""
        x = random((4, 5), 1)
        report = gradcheck(lambda t: weighted_sum(ops.mul(t, t)), x, samples=7, seed=3)
        assert report.checked == 7

    def test_conv2d(self):
        """Test conv2d gradients with stride, padding, dilation and groups."""
        params = ConvParams(stride=2, padding=2, dilation=2, groups=2)
        self.check(
            lambda x, w, b: weighted_sum(ops.conv2d(x, w, b, params)),
            [random((2, 4, 6, 5), 1), random((6, 2, 3, 3), 2), random((6,), 3)],
        )

    def test_conv_transpose2d(self):
        """Test conv_transpose2d gradients."""
        self.check(
            lambda x, w, b: weighted_sum(ops.conv_transpose2d(x, w, b, stride=2)),
            [random((2, 3, 3, 4), 4), random((3, 2, 2, 2), 5), random((2,), 6)],
        )

    def test_batch_norm_training(self):
        """Gradients flow through the batch statistics."""
        mean, var = Tensor(np.zeros(3)), Tensor(np.ones(3))
        self.check(
            lambda x, g, b: weighted_sum(ops.batch_norm(x, g, b, mean, var, training=True)),
            [random((2, 3, 3, 3), 7), random((3,), 8), random((3,), 9)],
        )

    def test_batch_norm_inference(self):
        """Test batch norm gradients with running statistics."""
        mean, var = random((3,), 10), random((3,), 11, 0.5, 2.0)
        self.check(
            lambda x, g, b: weighted_sum(ops.batch_norm(x, g, b, mean, var)),
            [random((2, 3, 3, 3), 12), random((3,), 13), random((3,), 14)],
        )

    def test_prelu(self):
        """Inputs stay at least 1e-3 away from the kink."""
        rng = np.random.default_rng(15)
        x = rng.uniform(1e-3 + 0.1, 1.0, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4))
        self.check(
            lambda t, s: weighted_sum(ops.prelu(t, s)),
            [Tensor(x), random((3,), 16, 0.1, 0.5)],
        )

    def test_avg_pool2d(self):
        """Test avg_pool2d gradients."""
        self.check(lambda x: weighted_sum(ops.avg_pool2d(x, 2)), random((2, 3, 6, 4), 17))
        self.check(lambda x: weighted_sum(ops.avg_pool2d(x, 3, 2)), random((1, 2, 7, 7), 18))

    def test_softmax(self):
        """Test channel softmax gradients."""
        self.check(lambda x: weighted_sum(ops.softmax(x, axis=-1)), random((2, 3, 5), 19))
        self.check(lambda x: weighted_sum(ops.softmax_channels(x)), random((2, 3, 2, 2), 20))

    def test_rowmax_minus(self):
        """Test the gradient of subtracting the row maximum."""
        self.check(lambda x: weighted_sum(ops.rowmax_minus(x)), random((2, 4, 4), 21))

    def test_bmm(self):
        """Test batched matrix product gradients."""
        self.check(
            lambda a, b: weighted_sum(ops.bmm(a, b)),
            [random((2, 3, 4), 22), random((2, 4, 5), 23)],
        )

    def test_elementwise(self):
        """Test the elementwise op gradients."""
        pair = [random((2, 3, 2, 2), 24), random((2, 3, 2, 2), 25)]
        self.check(lambda a, b: weighted_sum(ops.add(a, b)), pair)
        self.check(lambda a, b: weighted_sum(ops.mul(a, b)), pair)
        self.check(lambda a: weighted_sum(ops.scale(a, -1.5)), pair[0])
        self.check(
            lambda a, s: weighted_sum(ops.scalar_mul(a, s)),
            [pair[0], Tensor(np.array([0.7]))],
        )

    def test_layout_ops(self):
        """Test reshape, transpose and concat gradients."""
        a, b = random((2, 3, 2, 2), 26), random((2, 1, 2, 2), 27)
        self.check(lambda x, y: weighted_sum(ops.concat_channels([x, y])), [a, b])
        self.check(lambda x: weighted_sum(ops.reshape(x, (2, 3, 4))), a)
        self.check(lambda x: weighted_sum(ops.permute(x, (0, 2, 3, 1))), a)


class TestModelGradient(unittest.TestCase):
    """Reverse-mode gradients through the whole network match finite differences."""

    def test_end_to_end(self):
        """
        With unit PReLU slopes and inference-mode batch norm every layer is
        smooth, so the whole model is checked at a relaxed tolerance.
        """
        model = TwinLiteNet(ModelConfig(), seed=0, dtype="double").eval()
        for name, tensor in model.weights.items():
            if name.endswith(".act.slope"):
                tensor.data[...] = 1.0
        for name in ("attention.pam.gamma", "attention.cam.gamma"):
            model.weights[name].data[...] = 0.3
        image = random((1, 3, 16, 16), 30)
        with no_grad():
            logits = model(image)
        # Keep the loss of order one.
        weights = [
            Tensor(random(out.shape, 31 + i).data / max(np.abs(out.data).sum(), 1.0))
            for i, out in enumerate(logits)
        ]

        def loss(*_):
            total = None
            for out, weight in zip(model(image), weights):
                term = ops.sum_all(ops.mul(out, weight))
                total = term if total is None else ops.add(total, term)
            return total

        checked = [
            image,
            model.weights["encoder.level1.conv.weight"],
            model.weights["encoder.b2.bn.gamma"],
            model.weights["encoder.level3.0.branch2.weight"],
            model.weights["attention.pam.query.weight"],
            model.weights["attention.cam.gamma"],
            model.weights["attention.fuse_cam.act.slope"],
            model.weights["head_lane.up1.conv.weight"],
            model.weights["head_da.classifier.conv.bias"],
        ]
        report = gradcheck(loss, checked, samples=200, seed=0, min_magnitude=1e-5, name="model")
        assert report.passed(1e-4), report

    def check_model_loss(self, training):
        """One seeded element of every parameter tensor, plus the image, through model_loss."""
        model = TwinLiteNet(ModelConfig(), seed=1, dtype="double")
        model.train(training)
        batch = data.collate(data.synth_generate(2, seed=5, size=(16, 16), max_workers=1))
        image = Tensor(batch.images.data.astype(np.float64))
        targets = [Tensor(target.data.astype(np.float64)) for target in batch.targets]

        def loss(*_):
            return losses.model_loss(model(image), targets).total

        checked = 0
        tensors = [("image", image)] + sorted(model.parameters().items())
        for position, (name, tensor) in enumerate(tensors):
            report = gradcheck(loss, tensor, samples=1, seed=position, min_magnitude=1e-5, name=name)
            checked += report.checked
            assert report.passed(1e-4), report
        assert checked > 0.8 * len(tensors), checked

    def test_model_loss_inference_mode(self):
        """Running statistics, default PReLU slopes and attention scales."""
        self.check_model_loss(training=False)

    def test_model_loss_training_mode(self):
        """Batch statistics, differentiated through the mean and variance."""
        self.check_model_loss(training=True)


if __name__ == "__main__":
    unittest.main()
