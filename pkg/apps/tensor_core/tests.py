import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import CheckpointError, DimensionError, NonFiniteError, ParameterError

from . import ops
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck
from .layers import BatchNorm2d, Conv2d, Dropout
from .optim import SgdState, sgd_step
from .tensor import Tensor, precision


def leaf(values):
    return Tensor(values, requires_grad=True)


class TensorBasicsTest(SimpleTestCase):

    def test_grad_exists_only_when_required(self):
        self.assertIsNone(Tensor([1.0, 2.0]).grad)
        self.assertEqual(leaf([1.0, 2.0]).grad.shape, (2,))

    def test_non_finite_values_are_rejected(self):
        with self.assertRaises(NonFiniteError):
            Tensor([1.0, np.nan])
        with np.errstate(over='ignore'):
            with self.assertRaises(NonFiniteError):
                Tensor([1e308]) * 10.0

    def test_implicit_backward_needs_scalar(self):
        x = leaf([1.0, 2.0])
        with self.assertRaises(DimensionError):
            (x * 2.0).backward()

    def test_broadcast_gradients_are_reduced(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(np.array([1.0, 2.0, 3.0]))
        (a * b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_shared_node_accumulates(self):
        x = leaf([3.0])
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_tied_extremes_split_min_and_max(self):
        x = leaf(np.zeros((2, 4)))
        (x.max(axis=1) - x.min(axis=1)).sum().backward()
        np.testing.assert_array_equal(x.grad, [[-1.0, 0.0, 0.0, 1.0]] * 2)

    def test_precision_context(self):
        self.assertEqual(Tensor([1.0]).dtype, np.float64)
        with precision(np.float32):
            self.assertEqual(Tensor([1.0]).dtype, np.float32)
        self.assertEqual(Tensor([1.0]).dtype, np.float64)


class Conv2dTest(SimpleTestCase):

    def test_identity_kernel(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_diagonal_kernel(self):
        out = ops.conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor([[[[1.0, 0.0], [0.0, 1.0]]]]))
        np.testing.assert_array_equal(out.data, [[[[5.0]]]])

    def test_output_shape(self):
        rng = np.random.default_rng(0)
        out = ops.conv2d(Tensor(rng.normal(size=(2, 3, 16, 16))), Tensor(rng.normal(size=(8, 3, 3, 3))),
                         stride=2, padding=1)
        self.assertEqual(out.shape, (2, 8, 8, 8))

    def test_linearity(self):
        rng = np.random.default_rng(1)
        kernel = Tensor(rng.normal(size=(4, 2, 3, 3)))
        x, y = rng.normal(size=(2, 2, 2, 9, 9))
        left = ops.conv2d(Tensor(2.5 * x - 1.5 * y), kernel, stride=2, padding=1).data
        right = 2.5 * ops.conv2d(Tensor(x), kernel, stride=2, padding=1).data \
            - 1.5 * ops.conv2d(Tensor(y), kernel, stride=2, padding=1).data
        np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)

    def test_channel_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        self.assertIn('(1, 2, 4, 4)', str(ctx.exception))
        self.assertIn('(1, 3, 3, 3)', str(ctx.exception))

    def test_kernel_larger_than_padded_input(self):
        with self.assertRaises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)


class ActivationAndNormTest(SimpleTestCase):

    def test_relu_values_and_gradient(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        x = leaf([-2.0, 3.0])
        ops.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_all_negative(self):
        x = leaf(-np.ones(5))
        out = ops.relu(x)
        out.sum().backward()
        np.testing.assert_array_equal(out.data, np.zeros(5))
        np.testing.assert_array_equal(x.grad, np.zeros(5))

    def _norm(self, channels):
        return BatchNorm2d(channels)

    def test_constant_channel_normalizes_to_zero(self):
        norm = self._norm(1)
        out = norm(Tensor(np.full((4, 1, 3, 3), 7.0)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_beta_shifts_mean(self):
        norm = self._norm(2)
        norm.beta.data[...] = 5.0
        x = np.random.default_rng(2).normal(size=(4, 2, 5, 5))
        out = norm(Tensor(x))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), [5.0, 5.0], atol=1e-9)

    def test_eval_uses_running_statistics(self):
        gamma, beta = Tensor([2.0]), Tensor([0.5])
        mean, var = np.array([1.0]), np.array([4.0])
        x = np.array([3.0, -1.0]).reshape(2, 1, 1, 1)
        out = ops.batch_norm(Tensor(x), gamma, beta, mean, var, eps=1e-5, training=False)
        expected = (x - 1.0) / np.sqrt(4.0 + 1e-5) * 2.0 + 0.5
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_training_updates_running_statistics(self):
        norm = self._norm(1)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        norm(Tensor(x))
        np.testing.assert_allclose(norm.running_mean, [0.2])
        np.testing.assert_allclose(norm.running_var, [0.9 + 0.1 * 2.0])

    def test_single_sample_batch_uses_running_statistics(self):
        norm = self._norm(1)
        x = np.full((1, 1, 2, 2), 3.0)
        out = norm(Tensor(x))
        np.testing.assert_allclose(out.data, 3.0 / np.sqrt(1.0 + 1e-5))
        np.testing.assert_array_equal(norm.running_mean, [0.0])

    def test_non_positive_eps(self):
        with self.assertRaises(ParameterError):
            ops.batch_norm(Tensor(np.zeros((2, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]),
                           np.zeros(1), np.ones(1), eps=0.0)


class DropoutTest(SimpleTestCase):

    def test_zero_probability_is_identity(self):
        x = Tensor(np.arange(6.0))
        self.assertIs(ops.dropout(x, 0.0, True, 3), x)

    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0))
        np.testing.assert_array_equal(ops.dropout(x, 0.5, False, 3).data, x.data)

    def test_survivor_fraction(self):
        out = ops.dropout(Tensor(np.ones(100_000)), 0.5, True, 11)
        fraction = np.count_nonzero(out.data) / out.size
        self.assertLess(abs(fraction - 0.5), 0.01)
        np.testing.assert_array_equal(np.unique(out.data), [0.0, 2.0])

    def test_mean_preservation(self):
        p, trials = 0.2, 20_000
        out = ops.dropout(Tensor(np.ones(trials)), p, True, 5)
        sigma = np.sqrt(p / (1 - p)) / np.sqrt(trials)
        self.assertLess(abs(out.data.mean() - 1.0), 3 * sigma)

    def test_invalid_probability(self):
        for p in (1.0, 1.5, -0.1):
            with self.assertRaises(ParameterError):
                ops.dropout(Tensor([1.0]), p, True, 0)

    def test_module_reseed_reproduces_mask(self):
        layer = Dropout(0.5, seed=4)
        first = layer(Tensor(np.ones(32))).data
        layer.reseed(4)
        np.testing.assert_array_equal(layer(Tensor(np.ones(32))).data, first)


class BilinearSampleTest(SimpleTestCase):

    def test_integer_points_hit_cells(self):
        feature = np.arange(24, dtype=float).reshape(2, 3, 4)
        points = np.array([[0.0, 0.0], [3.0, 2.0], [1.0, 2.0]])
        out = ops.bilinear_sample(Tensor(feature), points)
        np.testing.assert_array_equal(out.data, feature[:, [0, 2, 2], [0, 3, 1]])

    def test_midpoint(self):
        out = ops.bilinear_sample(Tensor([[[1.0, 3.0]]]), np.array([[0.5, 0.0]]))
        np.testing.assert_allclose(out.data, [[2.0]])

    def test_constant_map_has_zero_coordinate_gradient(self):
        feature = Tensor(np.full((2, 5, 5), 4.0))
        points = leaf(np.array([[1.3, 2.7], [0.2, 3.9], [-3.0, 8.0]]))
        out = ops.bilinear_sample(feature, points)
        np.testing.assert_allclose(out.data, 4.0)
        out.sum().backward()
        np.testing.assert_allclose(points.grad, 0.0, atol=1e-12)

    def test_out_of_bounds_clamps_to_border(self):
        feature = np.arange(9, dtype=float).reshape(1, 3, 3)
        out = ops.bilinear_sample(Tensor(feature), np.array([[-5.0, -5.0], [10.0, 10.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 8.0]])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        feature = rng.normal(size=(2, 3, 6, 7))
        points = rng.uniform(0, 5, size=(2, 4, 2))
        batched = ops.bilinear_sample(Tensor(feature), points).data
        for b in range(2):
            np.testing.assert_allclose(batched[b], ops.bilinear_sample(Tensor(feature[b]), points[b]).data)


class LossTest(SimpleTestCase):

    def test_smooth_l1_examples(self):
        self.assertEqual(ops.smooth_l1(Tensor([1.0, 2.0]), np.array([1.0, 2.0])).item(), 0.0)
        self.assertAlmostEqual(ops.smooth_l1(Tensor([0.5]), np.array([0.0])).item(), 0.125)
        self.assertAlmostEqual(ops.smooth_l1(Tensor([2.0]), np.array([0.0])).item(), 1.5)

    def test_smooth_l1_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            ops.smooth_l1(Tensor([1.0, 2.0]), np.array([1.0]))

    def test_focal_single_positive(self):
        loss = ops.focal_loss(Tensor([0.0]), np.array([1]), alpha=0.25, gamma=2.0)
        self.assertAlmostEqual(loss.item(), 0.25 * 0.25 * np.log(2.0), places=12)
        self.assertAlmostEqual(loss.item(), 0.04332, places=5)

    def test_focal_confident_predictions(self):
        loss = ops.focal_loss(Tensor([60.0, -60.0]), np.array([1, 0]))
        self.assertAlmostEqual(loss.item(), 0.0, places=12)

    def test_focal_all_ignored(self):
        logits = leaf([0.3, -2.0, 5.0])
        loss = ops.focal_loss(logits, np.array([-1, -1, -1]))
        loss.backward()
        self.assertEqual(loss.item(), 0.0)
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_focal_clamp_keeps_values_finite(self):
        loss = ops.focal_loss(Tensor([-80.0]), np.array([1]))
        self.assertAlmostEqual(loss.item(), 0.25 * -np.log(1e-12), places=6)


class SgdTest(SimpleTestCase):

    def test_zero_gradient_keeps_params(self):
        param = leaf([1.0, -2.0])
        state = SgdState.for_parameters([param], learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([param], [np.zeros(2)], state)
        np.testing.assert_array_equal(param.data, [1.0, -2.0])

    def test_plain_step(self):
        param = leaf([1.0])
        state = SgdState(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([param], [np.ones(1)], state)
        np.testing.assert_allclose(param.data, [0.9])

    def test_momentum_iteration(self):
        param = leaf([0.0])
        state = SgdState.for_parameters([param], learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([param], [np.ones(1)], state)
        np.testing.assert_allclose(param.data, [-0.1])
        sgd_step([param], [np.ones(1)], state)
        np.testing.assert_allclose(param.data, [-0.29])

    def test_defaults_and_validation(self):
        state = SgdState()
        self.assertEqual((state.learning_rate, state.momentum, state.weight_decay), (5e-4, 0.9, 1e-5))
        with self.assertRaises(ParameterError):
            SgdState(learning_rate=-1.0)

    def test_velocity_count_must_match(self):
        state = SgdState.for_parameters([leaf([0.0])])
        with self.assertRaises(DimensionError):
            sgd_step([leaf([0.0]), leaf([1.0])], [np.zeros(1), np.zeros(1)], state)


class GradientSuiteTest(SimpleTestCase):
    """Backprop contra diferencias centrales, cinco formas por operación."""

    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def assertGradOk(self, fn, *inputs):
        result = gradcheck(fn, list(inputs), h=1e-5)
        self.assertLess(result.max_relative_error, 1e-4, msg=f"errores {result.per_input}")

    def test_conv2d(self):
        for n, c, o, size, k, stride, pad in [(1, 1, 1, 4, 3, 1, 0), (2, 2, 3, 5, 3, 2, 1), (1, 3, 2, 6, 1, 1, 0),
                                              (2, 1, 2, 7, 3, 2, 0), (1, 2, 2, 5, 2, 1, 1)]:
            x = leaf(self.rng.normal(size=(n, c, size, size)))
            w = leaf(self.rng.normal(size=(o, c, k, k)))
            b = leaf(self.rng.normal(size=(o,)))
            self.assertGradOk(lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=pad), x, w, b)

    def test_relu(self):
        for shape in [(3,), (2, 3), (2, 2, 2), (1, 4, 3), (5, 1)]:
            self.assertGradOk(ops.relu, leaf(self.rng.normal(size=shape)))

    def test_batch_norm(self):
        for n, c, h in [(2, 1, 2), (3, 2, 2), (2, 3, 1), (4, 1, 3), (2, 2, 3)]:
            x = leaf(self.rng.normal(size=(n, c, h, h)))
            gamma = leaf(self.rng.uniform(0.5, 1.5, size=c))
            beta = leaf(self.rng.normal(size=c))
            for training in (True, False):
                mean, var = np.zeros(c), np.ones(c)
                self.assertGradOk(
                    lambda x, g, b: ops.batch_norm(x, g, b, mean, var, training=training), x, gamma, beta
                )

    def test_dropout(self):
        for shape in [(4,), (3, 3), (2, 2, 2), (1, 2, 5), (6, 1)]:
            self.assertGradOk(lambda x: ops.dropout(x, 0.3, True, 9), leaf(self.rng.normal(size=shape)))

    def test_bilinear_sample(self):
        for c, h, w, p in [(1, 3, 3, 2), (2, 4, 5, 3), (3, 5, 4, 4), (1, 6, 6, 5), (2, 3, 7, 2)]:
            feature = leaf(self.rng.normal(size=(c, h, w)))
            points = np.stack([self.rng.uniform(0.1, w - 1.1, size=p), self.rng.uniform(0.1, h - 1.1, size=p)], 1)
            self.assertGradOk(ops.bilinear_sample, feature, leaf(points))

    def test_bilinear_sample_batched(self):
        feature = leaf(self.rng.normal(size=(2, 2, 4, 4)))
        points = leaf(self.rng.uniform(0.1, 2.9, size=(2, 3, 2)))
        self.assertGradOk(ops.bilinear_sample, feature, points)

    def test_smooth_l1(self):
        for shape in [(1,), (4,), (2, 3), (3, 2, 2), (5, 4)]:
            target = self.rng.normal(size=shape)
            pred = leaf(target + self.rng.choice([-1, 1], size=shape) * self.rng.uniform(0.1, 2.5, size=shape))
            self.assertGradOk(lambda p: ops.smooth_l1(p, target), pred)

    def test_focal_loss(self):
        for shape in [(3,), (2, 4), (1, 1, 3, 3), (2, 1, 2, 2), (6,)]:
            labels = self.rng.integers(-1, 2, size=shape)
            self.assertGradOk(lambda z: ops.focal_loss(z, labels), leaf(self.rng.normal(scale=2.0, size=shape)))

    def test_elementwise_and_reductions(self):
        for shape in [(3,), (2, 3), (2, 1, 3), (4, 2), (1, 5)]:
            a = leaf(self.rng.normal(size=shape))
            b = leaf(self.rng.normal(size=shape[-1:]))
            self.assertGradOk(lambda a, b: (a * b - a + 2.0 * b).mean(), a, b)
            self.assertGradOk(lambda a: a.sum(axis=-1, keepdims=True) * a, a)
            self.assertGradOk(lambda a: a.max(axis=-1) + a.min(axis=0).sum(), a)

    def test_shape_ops(self):
        for shape in [(2, 3), (3, 4), (2, 2, 2), (4, 1, 3), (1, 6)]:
            a = leaf(self.rng.normal(size=shape))
            flat = int(np.prod(shape))
            self.assertGradOk(lambda a: a.reshape(flat).transpose()[::2] * 3.0, a)
            self.assertGradOk(lambda a: ops.concatenate([a, a * 2.0], axis=0).transpose(), a)
            index = self.rng.integers(0, shape[0], size=4)
            self.assertGradOk(lambda a: a[index], a)


class DeterminismTest(SimpleTestCase):

    def _run(self):
        conv = Conv2d(2, 3, 3, rng=np.random.default_rng(7))
        x = leaf(np.random.default_rng(8).normal(size=(2, 2, 6, 6)))
        out = ops.dropout(ops.relu(conv(x)), 0.2, True, 13)
        loss = ops.smooth_l1(out, np.zeros(out.shape))
        loss.backward()
        return out.data, conv.weight.grad, x.grad

    def test_identical_seeds_are_bit_identical(self):
        for first, second in zip(self._run(), self._run()):
            self.assertTrue(np.array_equal(first, second))


class CheckpointTest(SimpleTestCase):

    def test_round_trip_with_metadata(self):
        conv = Conv2d(2, 4, 3, rng=np.random.default_rng(0))
        norm = BatchNorm2d(4)
        norm.running_mean[...] = [1.0, 2.0, 3.0, 4.0]
        state = {**conv.state_dict(), **{f"norm.{k}": v for k, v in norm.state_dict().items()}}
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'w.cspt', state, {'epoch': 3, 'preset': 'toy'})
            self.assertEqual(path.read_bytes()[:5], MAGIC)
            loaded, metadata = load_checkpoint(path)
        self.assertEqual(metadata, {'epoch': 3, 'preset': 'toy'})
        self.assertEqual(sorted(loaded), sorted(state))
        for name, values in state.items():
            np.testing.assert_array_equal(loaded[name], values.astype(np.float32))

        fresh = Conv2d(2, 4, 3, init='zeros')
        fresh.load_state_dict({k: loaded[k] for k in ('weight', 'bias')})
        np.testing.assert_array_equal(fresh.weight.data, conv.weight.data.astype(np.float32))

    def test_rejects_foreign_and_truncated_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            foreign = Path(tmp) / 'x.bin'
            foreign.write_bytes(b'NOTCSPT')
            with self.assertRaises(CheckpointError):
                load_checkpoint(foreign)
            good = save_checkpoint(Path(tmp) / 'g.cspt', {'a': np.ones((2, 2))})
            truncated = Path(tmp) / 't.cspt'
            truncated.write_bytes(good.read_bytes()[:-3])
            with self.assertRaises(CheckpointError):
                load_checkpoint(truncated)

    def test_shape_mismatch_on_load(self):
        conv = Conv2d(1, 2, 3)
        with self.assertRaises(CheckpointError):
            conv.load_state_dict({'weight': np.zeros((2, 1, 1, 1)), 'bias': np.zeros(2)})
