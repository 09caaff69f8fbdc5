import math
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, TestCase

from apps.core.exceptions import ConfigError, DatasetError, TrainingDivergedError
from apps.core.models import EstadoCorrida
from apps.datapipe.annotations import BBox, Patch
from apps.detector.config import DetectorConfig
from apps.detector.network import HeadOutput, build_detector
from apps.detector.services.inference import InferenceService
from apps.tensor_core.gradcheck import gradcheck
from apps.tensor_core.ops import IGNORE, NEGATIVE, POSITIVE
from apps.tensor_core.tensor import Tensor

from .assignment import AssignmentResult, LossWeights, assign_batch, assign_from_boxes, assign_targets
from .losses import total_loss
from .models import TrainingRun
from .services.training import TrainSettings, TrainingService, train_loop

SLOW_TESTS = os.environ.get('CUNEISPOT_SLOW_TESTS', '').lower() in ('1', 'true', 'yes')


def zero_head(size=8, k=3, requires_grad=False):
    return HeadOutput(
        Tensor(np.zeros((1, 2 * k, size, size)), requires_grad=requires_grad),
        Tensor(np.zeros((1, 2 * k, size, size)), requires_grad=requires_grad),
        Tensor(np.full((1, 1, size, size), -2.0), requires_grad=requires_grad),
    )


def reference_iou(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(w, 0.0) * max(h, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def reference_assignment(gt, p1_boxes, stride, weights):
    """Recorrido exhaustivo celda por celda y caja por caja."""
    height, width = p1_boxes.shape[:2]
    boxes = [[v / stride for v in box.as_tuple()] for box in gt]
    loc1 = {}
    for index, box in enumerate(boxes):
        cell = (min(int(math.floor((box[1] + box[3]) / 2)), height - 1),
                min(int(math.floor((box[0] + box[2]) / 2)), width - 1))
        area = (box[2] - box[0]) * (box[3] - box[1])
        if cell not in loc1 or (area, index) < loc1[cell][0]:
            loc1[cell] = ((area, index), box)

    labels = np.zeros((height, width), dtype=np.int64)
    loc2 = {}
    for y in range(height):
        for x in range(width):
            best, best_index = 0.0, None
            for index, box in enumerate(boxes):
                value = reference_iou(p1_boxes[y, x], box)
                if best_index is None or value > best:
                    best, best_index = value, index
            if best >= weights.theta_tp:
                labels[y, x] = POSITIVE
                loc2[(y, x)] = boxes[best_index]
            elif best >= weights.theta_fp:
                labels[y, x] = NEGATIVE if weights.assignment_mode == 'paper_literal' else IGNORE
            else:
                labels[y, x] = IGNORE if weights.assignment_mode == 'paper_literal' else NEGATIVE
    return {cell: box for cell, (_, box) in loc1.items()}, loc2, labels


def random_case(rng, size=8, stride=8):
    extent = size * stride
    gt = []
    for _ in range(rng.integers(0, 6)):
        w, h = rng.uniform(4, 30, size=2)
        x0, y0 = rng.uniform(0, extent - w), rng.uniform(0, extent - h)
        gt.append(BBox(x0, y0, x0 + w, y0 + h))
    low = rng.uniform(0, size - 1, size=(size, size, 2))
    p1_boxes = np.concatenate([low, low + rng.uniform(0.1, 4, size=(size, size, 2))], axis=-1)
    # parte de las celdas cerca de alguna GT para poblar todas las bandas
    for box in gt:
        for _ in range(4):
            y, x = rng.integers(0, size, size=2)
            p1_boxes[y, x] = np.array(box.as_tuple()) / stride + rng.normal(0, 0.15, size=4)
            p1_boxes[y, x, 2:] = np.maximum(p1_boxes[y, x, 2:], p1_boxes[y, x, :2] + 0.05)
    return gt, p1_boxes


class LossWeightsTest(SimpleTestCase):

    def test_defaults(self):
        weights = LossWeights()
        self.assertEqual((weights.lambda_loc1, weights.lambda_loc2, weights.lambda_class), (50.0, 100.0, 1.0))
        self.assertEqual((weights.theta_tp, weights.theta_fp, weights.assignment_mode), (0.7, 0.6, 'paper_literal'))

    def test_flag_spelling_is_normalized(self):
        self.assertEqual(LossWeights(assignment_mode='paper-literal').assignment_mode, 'paper_literal')

    def test_invalid(self):
        for bad in ({'theta_fp': 0.8}, {'theta_tp': 1.0}, {'lambda_loc2': 0}, {'assignment_mode': 'atss'}):
            with self.subTest(bad=bad), self.assertRaises(ConfigError):
                LossWeights(**bad)


class AssignmentTest(SimpleTestCase):
    cfg = DetectorConfig(k=3, input_size=128)

    def test_center_cell(self):
        result = assign_targets([BBox(96, 52, 104, 68)], zero_head(16), self.cfg, LossWeights())
        self.assertEqual(list(zip(*np.nonzero(result.loc1_mask))), [(7, 12)])
        np.testing.assert_allclose(result.loc1_targets[7, 12], [12, 6.5, 13, 8.5])

    def test_center_collision_keeps_smallest(self):
        big, small = BBox(80, 80, 112, 112), BBox(90, 90, 102, 102)
        result = assign_targets([big, small], zero_head(16), self.cfg, LossWeights())
        self.assertEqual(int(result.loc1_mask.sum()), 1)
        np.testing.assert_allclose(result.loc1_targets[12, 12], np.array(small.as_tuple()) / 8)

    def test_p1_equal_to_gt_is_sign(self):
        gt = [BBox(16, 16, 48, 40)]
        p1_boxes = np.tile(np.array(gt[0].as_tuple()) / 8, (8, 8, 1))
        result = assign_from_boxes(gt, p1_boxes, 8, LossWeights())
        self.assertTrue((result.labels == POSITIVE).all())
        self.assertTrue(result.loc2_mask.all())

    def test_empty_gt(self):
        p1_boxes = np.tile([1.0, 1.0, 3.0, 3.0], (8, 8, 1))
        literal = assign_from_boxes([], p1_boxes, 8, LossWeights())
        standard = assign_from_boxes([], p1_boxes, 8, LossWeights(assignment_mode='standard'))
        self.assertTrue((literal.labels == IGNORE).all())
        self.assertTrue((standard.labels == NEGATIVE).all())
        self.assertFalse(literal.loc1_mask.any() or literal.loc2_mask.any())

    def test_bands_per_mode(self):
        gt = [BBox(0, 0, 80, 80)]
        p1_boxes = np.zeros((1, 3, 4))
        p1_boxes[0, 0] = [0, 0, 10, 10]    # IoU 1
        p1_boxes[0, 1] = [0, 0, 10, 6.5]   # IoU 0.65
        p1_boxes[0, 2] = [0, 0, 10, 3]     # IoU 0.3
        literal = assign_from_boxes(gt, p1_boxes, 8, LossWeights()).labels[0].tolist()
        standard = assign_from_boxes(gt, p1_boxes, 8, LossWeights(assignment_mode='standard')).labels[0].tolist()
        self.assertEqual(literal, [POSITIVE, NEGATIVE, IGNORE])
        self.assertEqual(standard, [POSITIVE, IGNORE, NEGATIVE])

    def test_matches_exhaustive_reference(self):
        rng = np.random.default_rng(2024)
        modes = [LossWeights(), LossWeights(assignment_mode='standard')]
        for case in range(1000):
            gt, p1_boxes = random_case(rng)
            for weights in modes:
                result = assign_from_boxes(gt, p1_boxes, 8, weights)
                loc1, loc2, labels = reference_assignment(gt, p1_boxes, 8, weights)
                with self.subTest(case=case, mode=weights.assignment_mode):
                    np.testing.assert_array_equal(result.labels, labels)
                    self.assertEqual(set(zip(*np.nonzero(result.loc1_mask))), set(loc1))
                    self.assertEqual(set(zip(*np.nonzero(result.loc2_mask))), set(loc2))
                    for cell, box in loc1.items():
                        np.testing.assert_allclose(result.loc1_targets[cell], box, rtol=0, atol=1e-12)
                    for cell, box in loc2.items():
                        np.testing.assert_allclose(result.loc2_targets[cell], box, rtol=0, atol=1e-12)

    def test_raising_theta_tp_never_adds_signs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            gt, p1_boxes = random_case(rng)
            counts = [
                int((assign_from_boxes(gt, p1_boxes, 8, LossWeights(theta_fp=0.3, theta_tp=t)).labels
                     == POSITIVE).sum())
                for t in (0.5, 0.7, 0.9)
            ]
            self.assertEqual(counts, sorted(counts, reverse=True))

    def test_batch_stacks_per_image(self):
        head = HeadOutput(Tensor(np.zeros((2, 6, 8, 8))), Tensor(np.zeros((2, 6, 8, 8))),
                          Tensor(np.zeros((2, 1, 8, 8))))
        result = assign_batch([[BBox(0, 0, 16, 16)], []], head, DetectorConfig(k=3, input_size=64), LossWeights())
        self.assertEqual(result.labels.shape, (2, 8, 8))
        self.assertEqual(result.loc1_mask[0].sum(), 1)
        self.assertEqual(result.loc1_mask[1].sum(), 0)


class LossTest(SimpleTestCase):
    cfg = DetectorConfig(k=3, input_size=64)

    def offset_head(self, mode='paper_literal'):
        head = zero_head(8, requires_grad=True)
        # celda (2, 2): puntos (1.5, 1.5), (3.5, 3.5), (2.5, 2.5)
        head.p1_offsets.data[0, :, 2, 2] = [-0.5, -0.5, 1.5, 1.5, 0.5, 0.5]
        weights = LossWeights(assignment_mode=mode)
        assignment = assign_batch([[BBox(8, 8, 24, 24)]], head, self.cfg, weights)
        return head, assignment, weights

    def test_half_pixel_offset_center_loss(self):
        head, assignment, weights = self.offset_head()
        breakdown = total_loss(head, assignment, weights)
        self.assertAlmostEqual(breakdown.loc1, 0.125, places=12)
        self.assertAlmostEqual(weights.lambda_loc1 * breakdown.loc1, 6.25, places=10)
        self.assertEqual(breakdown.loc2, 0.0)

    def test_exact_center_boxes_give_zero_loc1(self):
        head = zero_head(8)
        head.p1_offsets.data[0, :, 2, 2] = [-1, -1, 1, 1, 0, 0]
        assignment = assign_batch([[BBox(8, 8, 24, 24)]], head, self.cfg, LossWeights())
        self.assertEqual(total_loss(head, assignment, LossWeights()).loc1, 0.0)

    def test_coincident_points_open_toward_the_center_target(self):
        head = zero_head(8, requires_grad=True)
        weights = LossWeights(assignment_mode='standard')
        assignment = assign_batch([[BBox(8, 8, 40, 40)]], head, self.cfg, weights)
        total_loss(head, assignment, weights).total.backward()
        # celda (3, 3), objetivo (1, 1, 5, 5): el primer punto baja, el último sube
        grad = head.p1_offsets.grad[0, :, 3, 3]
        self.assertTrue((grad[:2] > 0).all())
        self.assertTrue((grad[4:] < 0).all())
        np.testing.assert_array_equal(grad[2:4], 0.0)

    def test_no_positive_cells_give_no_refinement_gradient(self):
        head, assignment, weights = self.offset_head(mode='standard')
        self.assertEqual(assignment.positives, 0)
        total_loss(head, assignment, weights).total.backward()
        np.testing.assert_array_equal(head.p2_offsets.grad, 0.0)
        self.assertTrue(np.abs(head.logits.grad).sum() > 0)

    def test_empty_gt_gives_zero_localization_gradient(self):
        head = zero_head(8, requires_grad=True)
        weights = LossWeights(assignment_mode='standard')
        assignment = assign_batch([[]], head, self.cfg, weights)
        total_loss(head, assignment, weights).total.backward()
        np.testing.assert_array_equal(head.p1_offsets.grad, 0.0)
        np.testing.assert_array_equal(head.p2_offsets.grad, 0.0)
        self.assertTrue((head.logits.grad != 0).all())

    def test_total_is_weighted_sum_of_components(self):
        rng = np.random.default_rng(3)
        head = HeadOutput(Tensor(rng.normal(0, 1.5, (2, 6, 8, 8))), Tensor(rng.normal(0, 0.2, (2, 6, 8, 8))),
                          Tensor(rng.normal(0, 2, (2, 1, 8, 8))))
        gt = [[BBox(4, 4, 20, 28), BBox(30, 30, 50, 44)], [BBox(10, 40, 40, 60)]]
        weights = LossWeights(theta_fp=0.05, theta_tp=0.1)
        assignment = assign_batch(gt, head, self.cfg, weights)
        self.assertGreater(assignment.positives, 0)
        breakdown = total_loss(head, assignment, weights)

        def smooth(pred, target):
            d = np.abs(pred - target)
            return np.where(d < 1, 0.5 * d * d, d - 0.5).mean()

        p1 = head.p1_points().data
        p2 = head.p2_points().data
        boxes1 = np.concatenate([p1.min(axis=3), p1.max(axis=3)], axis=-1)
        boxes2 = np.concatenate([p2.min(axis=3), p2.max(axis=3)], axis=-1)
        loc1 = smooth(boxes1[assignment.loc1_mask], assignment.loc1_targets[assignment.loc1_mask])
        loc2 = smooth(boxes2[assignment.loc2_mask], assignment.loc2_targets[assignment.loc2_mask])

        z = head.logits.data[:, 0]
        labels = assignment.labels
        p = 1 / (1 + np.exp(-z))
        pt = np.where(labels == POSITIVE, p, 1 - p)
        alpha = np.where(labels == POSITIVE, 0.25, 0.75)
        focal = -alpha * (1 - pt) ** 2 * np.log(pt)
        focal = focal[labels != IGNORE].sum() / max(1, assignment.positives)

        self.assertAlmostEqual(breakdown.loc1, loc1, delta=1e-10)
        self.assertAlmostEqual(breakdown.loc2, loc2, delta=1e-10)
        self.assertAlmostEqual(breakdown.classification, focal, delta=1e-10)
        self.assertAlmostEqual(breakdown.total.item(), 50 * loc1 + 100 * loc2 + focal, delta=1e-10)

    def test_offset_gradients(self):
        rng = np.random.default_rng(11)
        p1 = Tensor(rng.normal(0, 1, (1, 6, 4, 4)), requires_grad=True)
        p2 = Tensor(rng.normal(0, 0.3, (1, 6, 4, 4)), requires_grad=True)
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)))
        loc1_mask = np.zeros((1, 4, 4), dtype=bool)
        loc1_mask[0, 1, 2] = loc1_mask[0, 3, 0] = True
        loc2_mask = np.zeros((1, 4, 4), dtype=bool)
        loc2_mask[0, 1, 2] = loc2_mask[0, 2, 2] = True
        targets = rng.uniform(0, 4, (1, 4, 4, 4))
        labels = np.where(loc2_mask, POSITIVE, NEGATIVE)
        assignment = AssignmentResult(loc1_mask, targets, loc2_mask, targets[..., ::-1].copy(), labels)
        weights = LossWeights()

        result = gradcheck(lambda a, b: total_loss(HeadOutput(a, b, logits), assignment, weights).total, [p1, p2])
        self.assertTrue(result.passed, result)


def square_patch(index, size=64):
    rng = np.random.default_rng(index)
    pixels = np.full((size, size), 40, dtype=np.uint8)
    boxes = []
    for x0, y0 in ((8, 8), (36, 32)):
        x0 += int(rng.integers(0, 6))
        pixels[y0:y0 + 16, x0:x0 + 16] = 220
        boxes.append(BBox(x0, y0, x0 + 16, y0 + 16))
    return Patch(f"seg{index}", (0, 0), pixels, boxes)


class TrainLoopTest(SimpleTestCase):
    cfg = DetectorConfig(input_size=64, backbone_channels=(4, 4, 8, 8), head_channels=8, seed=1)

    def setUp(self):
        self.train = [square_patch(i) for i in range(6)]
        self.val = [square_patch(i) for i in range(6, 8)]

    def test_zero_epochs_returns_initial_weights(self):
        result = train_loop(self.train, self.val, self.cfg, settings=TrainSettings(epochs=0))
        self.assertEqual(result.history, [])
        self.assertIsNone(result.best_epoch)
        initial = build_detector(self.cfg).state_dict()
        for name, values in result.detector.state_dict().items():
            np.testing.assert_array_equal(values, initial[name])

    def test_same_seed_gives_same_history(self):
        settings = TrainSettings(epochs=2, batch_size=4, learning_rate=1e-3, seed=9)
        weights = LossWeights(assignment_mode='standard')
        first = train_loop(self.train, self.val, self.cfg, weights, settings)
        second = train_loop(self.train, self.val, self.cfg, weights, settings)
        self.assertEqual(first.history, second.history)
        self.assertEqual([e['epoch'] for e in first.history], [1, 2])
        self.assertEqual(set(first.history[0]), {'epoch', 'train_loss', 'loc1', 'loc2', 'class', 'val_ap50'})

    def test_writes_best_checkpoint_and_history(self):
        settings = TrainSettings(epochs=1, batch_size=3)
        with tempfile.TemporaryDirectory() as tmp:
            result = train_loop(self.train, self.val, self.cfg, settings=settings, out_dir=tmp)
            self.assertTrue((Path(tmp) / 'history.json').exists())
            predictor = InferenceService.load_predictor(result.checkpoint_path)
        self.assertEqual(predictor.metadata['epoch'], 1)
        self.assertEqual(predictor.cfg, self.cfg)

    def test_nan_loss_aborts(self):
        nan_losses = {'loss': float('nan'), 'loc1': 0.0, 'loc2': 0.0, 'class': 0.0}
        with mock.patch('apps.training.services.training.train_step', return_value=nan_losses):
            with self.assertRaises(TrainingDivergedError):
                train_loop(self.train, self.val, self.cfg, settings=TrainSettings(epochs=1))

    def test_first_epoch_gives_p1_boxes_extent(self):
        settings = TrainSettings(epochs=1, batch_size=3, seed=2)
        result = train_loop(self.train, self.val, self.cfg, LossWeights(assignment_mode='standard'), settings)
        pixels = np.stack([patch.pixels for patch in self.val]).astype(np.float64)[:, None]
        boxes = result.detector(Tensor((pixels - pixels.mean()) / pixels.std())).p1_boxes().data
        self.assertTrue((boxes[..., 2] > boxes[..., 0]).all())
        self.assertTrue((boxes[..., 3] > boxes[..., 1]).all())

    def test_requires_validation_patches(self):
        with self.assertRaises(DatasetError):
            train_loop(self.train, [], self.cfg, settings=TrainSettings(epochs=1))

    def test_float32_precision(self):
        result = train_loop(self.train, self.val, self.cfg, settings=TrainSettings(epochs=1, precision=32))
        self.assertEqual(result.detector.parameters()[0].dtype, np.float32)

    @unittest.skipUnless(SLOW_TESTS, 'CUNEISPOT_SLOW_TESTS no está activo')
    def test_toy_training_halves_loss(self):
        from apps.datapipe.services.synth import SynthSettings, synth_generate
        from apps.datapipe.services.tiling import tile
        from apps.meshlight.raster import rasterize_mesh, shade_phong

        settings = SynthSettings()
        meshes, annotations = synth_generate(50, (3, 8), seed=4, settings=settings)
        patches = []
        for mesh, annotation in zip(meshes, annotations):
            image = shade_phong(rasterize_mesh(mesh, settings.render), settings.light)
            patches.extend(tile(annotation, 512, 256, pixels=image))
        cfg = DetectorConfig(preset='toy', seed=0)
        result = train_loop(patches[:40], patches[40:], cfg, LossWeights(assignment_mode='standard'),
                            TrainSettings(epochs=30, batch_size=8, seed=0))
        self.assertLess(result.history[-1]['train_loss'], 0.5 * result.history[0]['train_loss'])


class TrainingServiceTest(TestCase):
    cfg = TrainLoopTest.cfg

    def test_records_completed_run(self):
        train = [square_patch(i) for i in range(4)]
        with tempfile.TemporaryDirectory() as tmp:
            result = TrainingService.run(train, train[:2], self.cfg, LossWeights(), TrainSettings(epochs=1), tmp)
        run = TrainingRun.objects.get()
        self.assertEqual(run.estado, EstadoCorrida.COMPLETADO)
        self.assertEqual(run.epochs_run, 1)
        self.assertEqual(run.history, result.history)
        self.assertIsNotNone(run.completado_at)

    def test_records_failure(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(DatasetError):
            TrainingService.run([square_patch(0)], [], self.cfg, LossWeights(), TrainSettings(epochs=1), tmp)
        run = TrainingRun.objects.get()
        self.assertEqual(run.estado, EstadoCorrida.ERROR)
        self.assertIn('validación', run.error_mensaje)

    def test_no_record(self):
        TrainingService.run([square_patch(0)], [square_patch(1)], self.cfg, LossWeights(),
                            TrainSettings(epochs=0), None, record=False)
        self.assertFalse(TrainingRun.objects.exists())
